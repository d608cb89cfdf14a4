//! Split training on full or coreset data, plus split KNN.

pub mod adam;
pub mod knn;
pub mod model;
pub mod split;

use crate::clock::Stopwatch;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use knn::{knn_predict, KnnReference};
pub use model::{Mat, ModelKind, ModelSpec, ParamDump, SplitModel};
pub use split::SplitSession;

use crate::crypto::codec::CodecError;
use crate::data::{Label, SampleId, Task, VerticalDataset};
use crate::transport::{Federation, TransportError};

const SHUFFLE_TAG: u64 = 0x5348_5546;
const HOLDOUT_TAG: u64 = 0x484f_4c44;
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training or evaluation set")]
    EmptyData,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("sample {id} missing on client {client}")]
    MissingSample { id: SampleId, client: usize },
    #[error("sample {0} has no label")]
    MissingLabel(SampleId),
    #[error("sample {0} has no weight")]
    MissingWeight(SampleId),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("training diverged at lr {lr} in epoch {epoch} (loss {loss})")]
    Diverged { lr: f64, epoch: usize, loss: f64 },
    #[error("every learning rate in the grid diverged")]
    AllDiverged,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("malformed message: {0}")]
    Codec(#[from] CodecError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_grid: Vec<f64>,
    /// Mini-batch size as a fraction of the training set.
    pub batch_fraction: f64,
    pub adam: AdamConfig,
    /// Stop once `|loss[e] - loss[e - window]| < tol`.
    pub tol: f64,
    pub window: usize,
    pub max_epochs: usize,
    /// Share of the training set held out to pick the learning rate.
    pub validation_fraction: f64,
    /// Epoch losses above this abort the run.
    pub divergence: f64,
    /// MLP bottom and head width.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_grid: vec![1.0, 0.1, 0.01, 0.001],
            batch_fraction: 0.01,
            adam: AdamConfig::default(),
            tol: 1e-4,
            window: 5,
            max_epochs: 100,
            validation_fraction: 0.1,
            divergence: 1e10,
            hidden: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return bad("learning-rate grid must be non-empty and positive");
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return bad("batch fraction must lie in (0, 1]");
        }
        if !(self.tol.is_finite() && self.tol > 0.0) || self.window == 0 || self.hidden == 0 {
            return bad("tolerance, window and hidden width must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.divergence.is_nan() || self.divergence <= 0.0 {
            return bad("validation fraction must lie in [0, 1) and the divergence bound be positive");
        }
        Ok(())
    }

    pub fn batch_size(&self, n: usize) -> usize {
        ((self.batch_fraction * n as f64).round() as usize).max(1)
    }
}

/// Training ids with the label owner's per-sample weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub ids: Vec<SampleId>,
    pub weights: Vec<f64>,
}

impl TrainSet {
    pub fn uniform(ids: Vec<SampleId>) -> Self {
        let weights = vec![1.0; ids.len()];
        TrainSet { ids, weights }
    }

    pub fn weighted(ids: Vec<SampleId>, weights: Vec<f64>) -> Result<Self, TrainError> {
        if ids.len() != weights.len() {
            return Err(TrainError::Config(format!(
                "{} ids but {} weights",
                ids.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TrainError::Config(String::from(
                "weights must be finite and non-negative",
            )));
        }
        Ok(TrainSet { ids, weights })
    }

    pub fn unit_weights(&self) -> Self {
        TrainSet::uniform(self.ids.clone())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn weight_map(&self) -> BTreeMap<SampleId, f64> {
        self.ids.iter().copied().zip(self.weights.iter().copied()).collect()
    }

    fn subset(&self, idx: &[usize]) -> TrainSet {
        TrainSet {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy(f64),
    Mse(f64),
}

impl Metric {
    pub fn value(self) -> f64 {
        match self {
            Metric::Accuracy(v) | Metric::Mse(v) => v,
        }
    }

    /// Higher is better.
    pub fn score(self) -> f64 {
        match self {
            Metric::Accuracy(v) => v,
            Metric::Mse(v) => -v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy(_) => "accuracy",
            Metric::Mse(_) => "mse",
        }
    }
}

/// Accuracy or mean squared error, optionally weighted.
pub fn evaluate(
    task: Task,
    predictions: &[Label],
    truth: &[Label],
    weights: Option<&[f64]>,
) -> Result<Metric, TrainError> {
    if truth.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if predictions.len() != truth.len() || weights.is_some_and(|w| w.len() != truth.len()) {
        return Err(TrainError::Config(String::from(
            "prediction, truth and weight lengths differ",
        )));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..truth.len()).map(w).sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(TrainError::EmptyData);
    }
    let sum: f64 = match task {
        Task::Classification { .. } => (0..truth.len())
            .filter(|&i| predictions[i].class() == truth[i].class())
            .map(w)
            .sum(),
        Task::Regression => (0..truth.len())
            .map(|i| w(i) * (predictions[i].as_f64() - truth[i].as_f64()).powi(2))
            .sum(),
    };
    Ok(match task {
        Task::Classification { .. } => Metric::Accuracy(sum / total),
        Task::Regression => Metric::Mse(sum / total),
    })
}

/// Predictions of `model` for `ids`, computed in bounded chunks.
pub fn predict(model: &SplitModel, data: &VerticalDataset, ids: &[SampleId]) -> Result<Vec<Label>, TrainError> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        out.extend(model.predict(&split::gather_all(data, chunk)?));
    }
    Ok(out)
}

pub fn evaluate_model(
    model: &SplitModel,
    data: &VerticalDataset,
    ids: &[SampleId],
    weights: Option<&[f64]>,
) -> Result<Metric, TrainError> {
    let preds = predict(model, data, ids)?;
    let truth = split::gather_labels(&data.labels, ids)?;
    evaluate(data.task, &preds, &truth, weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub epochs: usize,
    pub diverged: bool,
    pub validation: Option<Metric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelKind,
    pub lr: f64,
    pub epochs: usize,
    pub converged: bool,
    pub loss_curve: Vec<f64>,
    pub train_metric: Metric,
    pub test_metric: Option<Metric>,
    pub samples: usize,
    pub batch_size: usize,
    /// Samples processed by the final run.
    pub sample_epochs: u64,
    /// Samples processed including the learning-rate search.
    pub total_sample_epochs: u64,
    pub grid: Vec<GridPoint>,
    pub bytes: u64,
    pub messages: u64,
    pub wall_ms: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: SplitModel,
}

/// One fixed-learning-rate run.
pub struct LrRun {
    pub model: SplitModel,
    pub losses: Vec<f64>,
    pub converged: bool,
    pub sample_epochs: u64,
}

/// Trains from a fresh initialization at one learning rate.
pub fn train_at_lr(
    fed: &Federation,
    data: &VerticalDataset,
    set: &TrainSet,
    spec: &ModelSpec,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LrRun, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let total_w: f64 = set.weights.iter().sum();
    if !(total_w.is_finite() && total_w > 0.0) {
        return Err(TrainError::Config(String::from("training weights sum to zero")));
    }
    let weights = set.weight_map();
    let model = SplitModel::init(spec.clone(), cfg.seed);
    let mut session = SplitSession::new(fed, data, &weights, model, lr, cfg.adam)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ SHUFFLE_TAG);
    let mut order = set.ids.clone();
    let bs = cfg.batch_size(order.len());
    let mut losses = Vec::new();
    let mut converged = false;

    let result = (|| {
        for epoch in 0..cfg.max_epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for batch in order.chunks(bs) {
                sum += match session.step(batch) {
                    Err(TrainError::NonFinite(_)) => {
                        return Err(TrainError::Diverged {
                            lr,
                            epoch,
                            loss: f64::NAN,
                        })
                    }
                    other => other?,
                };
            }
            let loss = sum / total_w;
            if !loss.is_finite() || loss > cfg.divergence {
                return Err(TrainError::Diverged { lr, epoch, loss });
            }
            losses.push(loss);
            let e = losses.len() - 1;
            if e >= cfg.window && (loss - losses[e - cfg.window]).abs() < cfg.tol {
                converged = true;
                break;
            }
        }
        Ok(())
    })();
    let model = session.finish(fed);
    result?;
    let sample_epochs = (set.len() * losses.len()) as u64;
    Ok(LrRun {
        model,
        losses,
        converged,
        sample_epochs,
    })
}

fn holdout(set: &TrainSet, cfg: &TrainConfig) -> (TrainSet, TrainSet) {
    let n = set.len();
    let n_val = ((cfg.validation_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 || cfg.validation_fraction == 0.0 {
        return (set.clone(), set.clone());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(cfg.seed ^ HOLDOUT_TAG));
    let (val, fit) = idx.split_at(n_val);
    let (mut fit, mut val) = (fit.to_vec(), val.to_vec());
    fit.sort_unstable();
    val.sort_unstable();
    (set.subset(&fit), set.subset(&val))
}

/// Picks the learning rate on a held-out slice, then retrains on the whole set.
pub fn train_until_converged(
    fed: &Federation,
    data: &VerticalDataset,
    set: &TrainSet,
    kind: ModelKind,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if kind == ModelKind::Knn {
        return Err(TrainError::Config(String::from("knn has no training phase")));
    }
    if set.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let spec = ModelSpec::new(kind, data.client_dims(), data.task, cfg.hidden);
    let start_stats = fed.bus.snapshot_stats();
    let start = Stopwatch::start();

    let mut grid = Vec::new();
    let mut search_samples = 0u64;
    let lr = if cfg.lr_grid.len() == 1 {
        cfg.lr_grid[0]
    } else {
        let (fit, val) = holdout(set, cfg);
        let mut best: Option<(f64, f64)> = None;
        for &lr in &cfg.lr_grid {
            match train_at_lr(fed, data, &fit, &spec, lr, cfg) {
                Ok(run) => {
                    search_samples += run.sample_epochs;
                    let metric = evaluate_model(&run.model, data, &val.ids, Some(&val.weights))?;
                    if best.is_none_or(|(_, s)| metric.score() > s) {
                        best = Some((lr, metric.score()));
                    }
                    grid.push(GridPoint {
                        lr,
                        epochs: run.losses.len(),
                        diverged: false,
                        validation: Some(metric),
                    });
                }
                Err(TrainError::Diverged { epoch, .. }) => {
                    search_samples += (fit.len() * (epoch + 1)) as u64;
                    grid.push(GridPoint {
                        lr,
                        epochs: epoch + 1,
                        diverged: true,
                        validation: None,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        best.ok_or(TrainError::AllDiverged)?.0
    };

    let run = train_at_lr(fed, data, set, &spec, lr, cfg)?;
    let train_metric = evaluate_model(&run.model, data, &set.ids, Some(&set.weights))?;
    let stats = fed.bus.snapshot_stats().since(&start_stats);
    let report = TrainReport {
        model: kind,
        lr,
        epochs: run.losses.len(),
        converged: run.converged,
        loss_curve: run.losses,
        train_metric,
        test_metric: None,
        samples: set.len(),
        batch_size: cfg.batch_size(set.len()),
        sample_epochs: run.sample_epochs,
        total_sample_epochs: run.sample_epochs + search_samples,
        grid,
        bytes: stats.total_bytes(),
        messages: stats.message_count,
        wall_ms: start.elapsed_ns() as f64 / 1e6,
    };
    Ok(TrainOutcome {
        report,
        model: run.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluate_definitions() {
        let t = [Label::Class(0), Label::Class(1), Label::Class(1)];
        assert_eq!(
            evaluate(Task::Classification { classes: 2 }, &t, &t, None).unwrap(),
            Metric::Accuracy(1.0)
        );
        let y = [Label::Value(1.0), Label::Value(2.0), Label::Value(6.0)];
        let mean = [Label::Value(3.0); 3];
        // population variance of {1, 2, 6}
        let m = evaluate(Task::Regression, &mean, &y, None).unwrap();
        assert!((m.value() - 14.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            evaluate(Task::Regression, &[], &[], None),
            Err(TrainError::EmptyData)
        ));
        let w = [3.0, 1.0, 0.0];
        let p = [Label::Class(0), Label::Class(0), Label::Class(0)];
        assert_eq!(
            evaluate(Task::Classification { classes: 2 }, &p, &t, Some(&w)).unwrap(),
            Metric::Accuracy(0.75)
        );
    }

    #[test]
    fn batch_size_rounds_and_floors_at_one() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.batch_size(7000), 70);
        assert_eq!(cfg.batch_size(128), 1);
        assert_eq!(cfg.batch_size(10), 1);
    }

    #[test]
    fn holdout_is_disjoint_and_covers() {
        let set = TrainSet::uniform((0..50).map(SampleId).collect());
        let (fit, val) = holdout(&set, &TrainConfig::default());
        assert_eq!(val.len(), 5);
        assert_eq!(fit.len(), 45);
        let mut all: Vec<_> = fit.ids.iter().chain(&val.ids).copied().collect();
        all.sort();
        assert_eq!(all, set.ids);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cfg = TrainConfig {
            lr_grid: vec![],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_fraction: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
