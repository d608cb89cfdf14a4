//! Experiment runner: alignment, optional coreset, training, and the
//! comparison table built from JSON-lines records.

use crate::clock::Stopwatch;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coreset::{build_coreset, CoresetConfig, CoresetError, CoresetReport};
use crate::data::{
    generate_blobs, generate_linear_regression, generate_planted_clusters, load_csv_dataset, vertical_partition,
    BlobSpec, DataError, PlantedSpec, SampleId, TaskKind, VerticalDataset,
};
use crate::mpsi::{run_mpsi, MpsiError, MpsiOptions, MpsiRunRecord, SchedulePolicy, Topology};
use crate::tpsi::{TpsiConfig, TpsiProtocol};
use crate::train::{
    evaluate, knn_predict, train_until_converged, KnnReference, Metric, ModelKind, TrainConfig, TrainError,
    TrainReport, TrainSet,
};
use crate::transport::{CommStats, Federation};

const SPLIT_TAG: u64 = 0x5350_4c54;
const HOLD_TAG: u64 = 0x484f_4c44;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Data,
    Alignment,
    Coreset,
    Training,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Data => "data",
            Phase::Alignment => "alignment",
            Phase::Coreset => "coreset",
            Phase::Training => "training",
        })
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error("{phase} phase failed: {message}")]
    Phase { phase: Phase, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad record on line {line}: {source}")]
    Record { line: usize, source: serde_json::Error },
}

fn failed(phase: Phase) -> impl Fn(&dyn std::fmt::Display) -> HarnessError {
    move |e| HarnessError::Phase {
        phase,
        message: e.to_string(),
    }
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        failed(Phase::Data)(&e)
    }
}

impl From<MpsiError> for HarnessError {
    fn from(e: MpsiError) -> Self {
        failed(Phase::Alignment)(&e)
    }
}

impl From<CoresetError> for HarnessError {
    fn from(e: CoresetError) -> Self {
        failed(Phase::Coreset)(&e)
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        failed(Phase::Training)(&e)
    }
}

/// Where the samples come from. Synthetic sources are split over the
/// experiment's client count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        label: String,
        task: TaskKind,
    },
    Blobs {
        n: usize,
        d: usize,
        classes: usize,
        separation: f64,
        seed: u64,
    },
    Planted {
        n: usize,
        dim_per_client: usize,
        clusters: usize,
        classes: usize,
        spread: f64,
        seed: u64,
    },
    Linear {
        n: usize,
        d: usize,
        noise: f64,
        seed: u64,
    },
}

impl DatasetSource {
    pub fn load(&self, clients: usize) -> Result<VerticalDataset, DataError> {
        match self {
            DatasetSource::Csv { path, label, task } => {
                vertical_partition(&load_csv_dataset(path, label, *task)?, clients)
            }
            DatasetSource::Blobs {
                n,
                d,
                classes,
                separation,
                seed,
            } => generate_blobs(&BlobSpec {
                n: *n,
                d: *d,
                clients,
                classes: *classes,
                separation: *separation,
                seed: *seed,
            }),
            DatasetSource::Planted {
                n,
                dim_per_client,
                clusters,
                classes,
                spread,
                seed,
            } => generate_planted_clusters(&PlantedSpec {
                n: *n,
                clients,
                dim_per_client: *dim_per_client,
                clusters: *clusters,
                classes: *classes,
                spread: *spread,
                seed: *seed,
            }),
            DatasetSource::Linear { n, d, noise, seed } => generate_linear_regression(*n, *d, clients, *noise, *seed),
        }
    }

    /// Short name used to group report rows; seeds are left out so repeated
    /// runs land in one group.
    pub fn name(&self) -> String {
        match self {
            DatasetSource::Csv { path, .. } => path
                .file_stem()
                .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned()),
            DatasetSource::Blobs {
                n,
                d,
                classes,
                separation,
                ..
            } => format!("blobs(n={n},d={d},L={classes},sep={separation})"),
            DatasetSource::Planted {
                n,
                dim_per_client,
                clusters,
                classes,
                ..
            } => {
                format!("planted(n={n},d_m={dim_per_client},c={clusters},L={classes})")
            }
            DatasetSource::Linear { n, d, .. } => format!("linear(n={n},d={d})"),
        }
    }
}

/// The four framework configurations compared in the evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    StarAll,
    TreeAll,
    StarCss,
    TreeCss,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [
        Baseline::StarAll,
        Baseline::TreeAll,
        Baseline::StarCss,
        Baseline::TreeCss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::StarAll => "StarALL",
            Baseline::TreeAll => "TreeALL",
            Baseline::StarCss => "StarCSS",
            Baseline::TreeCss => "TreeCSS",
        }
    }

    fn parts(self) -> (Topology, SchedulePolicy, bool) {
        match self {
            Baseline::StarAll => (Topology::Star, SchedulePolicy::RequestOrder, false),
            Baseline::TreeAll => (Topology::Tree, SchedulePolicy::VolumeAware, false),
            Baseline::StarCss => (Topology::Star, SchedulePolicy::RequestOrder, true),
            Baseline::TreeCss => (Topology::Tree, SchedulePolicy::VolumeAware, true),
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown configuration `{s}` (StarALL|TreeALL|StarCSS|TreeCSS)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: DatasetSource,
    pub clients: usize,
    /// Share of the training pool held by every client; each other sample is
    /// missing at one random client.
    pub overlap: f64,
    pub topology: Topology,
    pub policy: SchedulePolicy,
    pub protocol: TpsiProtocol,
    pub rsa_bits: usize,
    pub use_coreset: bool,
    pub clusters: usize,
    pub model: ModelKind,
    pub knn_k: usize,
    pub train: TrainConfig,
    /// Share of samples held out for testing before alignment.
    pub test_fraction: f64,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(dataset: DatasetSource, clients: usize, model: ModelKind, seed: u64) -> Self {
        ExperimentSpec {
            dataset,
            clients,
            overlap: 1.0,
            topology: Topology::Tree,
            policy: SchedulePolicy::VolumeAware,
            protocol: TpsiProtocol::Oprf,
            rsa_bits: 2048,
            use_coreset: true,
            clusters: 8,
            model,
            knn_k: 5,
            train: TrainConfig::default().with_seed(seed),
            test_fraction: 0.3,
            seed,
        }
    }

    pub fn baseline(mut self, b: Baseline) -> Self {
        let (topology, policy, use_coreset) = b.parts();
        self.topology = topology;
        self.policy = policy;
        self.use_coreset = use_coreset;
        self
    }

    /// `StarALL`-style name: topology plus ALL or CSS.
    pub fn config_name(&self) -> String {
        let topo = match self.topology {
            Topology::Tree => "Tree",
            Topology::Path => "Path",
            Topology::Star => "Star",
        };
        format!("{topo}{}", if self.use_coreset { "CSS" } else { "ALL" })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Spec(m));
        if self.clients < 2 {
            return bad(format!("need at least 2 clients, got {}", self.clients));
        }
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            return bad(format!("overlap {} not in (0, 1]", self.overlap));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test fraction {} not in (0, 1)", self.test_fraction));
        }
        if self.use_coreset && self.clusters == 0 {
            return bad(String::from("coreset needs at least one cluster"));
        }
        if self.model == ModelKind::Knn && self.knn_k == 0 {
            return bad(String::from("knn needs k >= 1"));
        }
        self.train.validate().map_err(|e| HarnessError::Spec(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: String,
    pub dataset: String,
    pub spec: ExperimentSpec,
    pub samples: usize,
    pub test_samples: usize,
    /// Size of the aligned training set.
    pub aligned: usize,
    pub psi: CommStats,
    pub coreset: Option<CommStats>,
    pub coreset_report: Option<CoresetReport>,
    pub train: CommStats,
    /// Samples the model was fit on.
    pub train_data: usize,
    pub train_report: Option<TrainReport>,
    pub test_metric: Metric,
    pub total_bytes: u64,
    pub wall_ms: f64,
}

impl RunRecord {
    pub fn coreset_size(&self) -> Option<usize> {
        self.coreset_report.as_ref().map(|r| r.coreset_size)
    }

    /// Sum of the per-phase byte counts.
    pub fn phase_bytes(&self) -> u64 {
        self.psi.total_bytes() + self.coreset.as_ref().map_or(0, CommStats::total_bytes) + self.train.total_bytes()
    }

    /// The record with every wall-clock field zeroed.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        r.wall_ms = 0.0;
        r.psi.wall_ns = 0;
        r.train.wall_ns = 0;
        if let Some(c) = &mut r.coreset {
            c.wall_ns = 0;
        }
        if let Some(t) = &mut r.train_report {
            t.wall_ms = 0.0;
        }
        r
    }
}

/// Seeded split of every labelled id into a training pool and a test set,
/// both sorted.
pub fn split_ids(data: &VerticalDataset, test_fraction: f64, seed: u64) -> (Vec<SampleId>, Vec<SampleId>) {
    let mut ids: Vec<SampleId> = data.labels.ids().collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha20Rng::seed_from_u64(seed ^ SPLIT_TAG));
    let n_test = ((test_fraction * ids.len() as f64).round() as usize)
        .max(1)
        .min(ids.len().saturating_sub(1));
    let mut test = ids[..n_test].to_vec();
    let mut pool = ids[n_test..].to_vec();
    test.sort_unstable();
    pool.sort_unstable();
    (pool, test)
}

/// Splits off the test set, then derives each client's holding of the pool.
fn holdings(data: &VerticalDataset, spec: &ExperimentSpec) -> (Vec<Vec<SampleId>>, Vec<SampleId>) {
    let (pool, test) = split_ids(data, spec.test_fraction, spec.seed);

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ HOLD_TAG);
    let mut sets = vec![Vec::with_capacity(pool.len()); spec.clients];
    for id in pool {
        let missing = if rng.gen::<f64>() < spec.overlap {
            None
        } else {
            Some(rng.gen_range(0..spec.clients))
        };
        for (m, set) in sets.iter_mut().enumerate() {
            if Some(m) != missing {
                set.push(id);
            }
        }
    }
    (sets, test)
}

/// Alignment, then the optional coreset, then training; all on one bus.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunRecord, HarnessError> {
    spec.validate()?;
    let start = Stopwatch::start();
    let data = spec.dataset.load(spec.clients)?;
    let (sets, test_ids) = holdings(&data, spec);
    let fed = Federation::new(spec.clients);

    let mut opts = MpsiOptions::new(spec.topology, spec.policy, spec.protocol);
    opts.tpsi = TpsiConfig::with_rsa_bits(spec.rsa_bits);
    opts.seed = spec.seed;
    let t0 = fed.bus.snapshot_stats();
    let alignment = run_mpsi(&fed, &sets, &opts)?;
    let t1 = fed.bus.snapshot_stats();
    let aligned = alignment.result.ids.clone();
    if aligned.is_empty() {
        return Err(failed(Phase::Alignment)(&"empty intersection"));
    }

    let (train_set, coreset, coreset_report) = if spec.use_coreset {
        let out = build_coreset(
            &fed,
            &data,
            &aligned,
            &alignment.keys,
            &CoresetConfig::new(spec.clusters, spec.seed),
        )?;
        let stats = fed.bus.snapshot_stats().since(&t1);
        let set = TrainSet::weighted(out.selection.ids, out.selection.weights)?;
        (set, Some(stats), Some(out.report))
    } else {
        (TrainSet::uniform(aligned.clone()), None, None)
    };
    let t2 = fed.bus.snapshot_stats();

    let truth = crate::train::split::gather_labels(&data.labels, &test_ids)?;
    let (train_report, test_metric) = if spec.model == ModelKind::Knn {
        let refs = KnnReference {
            ids: train_set.ids.clone(),
            weights: train_set.weights.clone(),
        };
        let k = spec.knn_k.min(refs.ids.len());
        let preds = knn_predict(&fed, &data, &refs, &test_ids, k)?;
        (None, evaluate(data.task, &preds, &truth, None)?)
    } else {
        let mut out = train_until_converged(&fed, &data, &train_set, spec.model, &spec.train)?;
        let metric = crate::train::evaluate_model(&out.model, &data, &test_ids, None)?;
        out.report.test_metric = Some(metric);
        (Some(out.report), metric)
    };
    let end = fed.bus.snapshot_stats();

    Ok(RunRecord {
        config: spec.config_name(),
        dataset: spec.dataset.name(),
        spec: spec.clone(),
        samples: data.labels.len(),
        test_samples: test_ids.len(),
        aligned: aligned.len(),
        psi: t1.since(&t0),
        coreset,
        coreset_report,
        train: end.since(&t2),
        train_data: train_set.len(),
        train_report,
        test_metric,
        total_bytes: end.since(&t0).total_bytes(),
        wall_ms: start.elapsed_ns() as f64 / 1e6,
    })
}

pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, record: &T) -> Result<(), HarnessError> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(f, "{line}")?;
    Ok(())
}

/// Runs the experiment and appends its record to `path`.
pub fn run_and_record(spec: &ExperimentSpec, path: impl AsRef<Path>) -> Result<RunRecord, HarnessError> {
    let record = run_experiment(spec)?;
    append_jsonl(path, &record)?;
    Ok(record)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>, HarnessError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| HarnessError::Record { line: i + 1, source })?);
    }
    Ok(out)
}

/// One table row: the mean over every record sharing dataset, model and config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: ModelKind,
    pub config: String,
    pub runs: usize,
    pub metric: String,
    pub value: f64,
    pub wall_ms: f64,
    pub train_data: f64,
    pub bytes: f64,
    /// StarALL wall time over this row's wall time.
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let show_speedup = self.rows.iter().any(|r| r.speedup.is_some());
        let mut out = String::new();
        let _ = write!(
            out,
            "{:<34} {:<6} {:<8} {:>4} {:>10} {:>11} {:>10} {:>14}",
            "dataset", "model", "config", "runs", "metric", "wall_ms", "train_data", "bytes"
        );
        if show_speedup {
            let _ = write!(out, " {:>8}", "speedup");
        }
        out.push('\n');
        for r in &self.rows {
            let metric = format!("{}={:.4}", if r.metric == "accuracy" { "acc" } else { "mse" }, r.value);
            let _ = write!(
                out,
                "{:<34} {:<6} {:<8} {:>4} {:>10} {:>11.1} {:>10.0} {:>14.0}",
                r.dataset,
                r.model.to_string(),
                r.config,
                r.runs,
                metric,
                r.wall_ms,
                r.train_data,
                r.bytes
            );
            if show_speedup {
                match r.speedup {
                    Some(s) => {
                        let _ = write!(out, " {:>7.2}x", s);
                    }
                    None => {
                        let _ = write!(out, " {:>8}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn config_rank(config: &str) -> usize {
    Baseline::ALL
        .iter()
        .position(|b| b.name() == config)
        .unwrap_or(Baseline::ALL.len())
}

/// Groups records by dataset and model; speedups are against the group's
/// StarALL row when the group has one and more than one row.
pub fn emit_report(records: &[RunRecord]) -> Report {
    let mut groups: BTreeMap<(String, String, usize, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = (
            r.dataset.clone(),
            r.spec.model.to_string(),
            config_rank(&r.config),
            r.config.clone(),
        );
        groups.entry(key).or_default().push(r);
    }
    let mut rows: Vec<ReportRow> = groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = |f: &dyn Fn(&RunRecord) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            ReportRow {
                dataset: g[0].dataset.clone(),
                model: g[0].spec.model,
                config: g[0].config.clone(),
                runs: g.len(),
                metric: g[0].test_metric.name().to_string(),
                value: mean(&|r| r.test_metric.value()),
                wall_ms: mean(&|r| r.wall_ms),
                train_data: mean(&|r| r.train_data as f64),
                bytes: mean(&|r| r.total_bytes as f64),
                speedup: None,
            }
        })
        .collect();
    let mut by_group: BTreeMap<(String, ModelKind), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_group.entry((r.dataset.clone(), r.model)).or_default().push(i);
    }
    for idx in by_group.values() {
        if idx.len() < 2 {
            continue;
        }
        if let Some(&base) = idx.iter().find(|&&i| rows[i].config == Baseline::StarAll.name()) {
            let base_wall = rows[base].wall_ms;
            for &i in idx {
                rows[i].speedup = Some(base_wall / rows[i].wall_ms.max(f64::MIN_POSITIVE));
            }
        }
    }
    Report { rows }
}

/// One MPSI run per (topology, policy, protocol), each on a fresh bus,
/// checked against the plain intersection.
pub fn psi_bench(
    sets: &[Vec<SampleId>],
    combos: &[(Topology, SchedulePolicy, TpsiProtocol)],
    tpsi: TpsiConfig,
    seed: u64,
) -> Result<Vec<MpsiRunRecord>, HarnessError> {
    let mut expected: Option<BTreeSet<SampleId>> = None;
    for s in sets {
        let s: BTreeSet<SampleId> = s.iter().copied().collect();
        expected = Some(match expected {
            None => s,
            Some(e) => e.intersection(&s).copied().collect(),
        });
    }
    let expected: Vec<SampleId> = expected.unwrap_or_default().into_iter().collect();
    let mut out = Vec::with_capacity(combos.len());
    for &(topology, policy, protocol) in combos {
        let fed = Federation::new(sets.len());
        let mut opts = MpsiOptions::new(topology, policy, protocol);
        opts.tpsi = tpsi;
        opts.seed = seed;
        let outcome = run_mpsi(&fed, sets, &opts)?;
        if outcome.result.ids != expected {
            return Err(failed(Phase::Alignment)(&format!(
                "{topology}/{policy}/{protocol}: {} ids, expected {}",
                outcome.result.len(),
                expected.len()
            )));
        }
        out.push(MpsiRunRecord::from_outcome(sets, &opts, &outcome));
    }
    Ok(out)
}

/// Text table for `psi-bench` output.
pub fn psi_table(records: &[MpsiRunRecord]) -> String {
    let mut out = format!(
        "{:>3} {:<5} {:<13} {:<5} {:>6} {:>5} {:>14} {:>14} {:>10}\n",
        "M", "topo", "policy", "proto", "rounds", "tpsi", "tpsi_bytes", "total_bytes", "wall_ms"
    );
    for r in records {
        let _ = writeln!(
            out,
            "{:>3} {:<5} {:<13} {:<5} {:>6} {:>5} {:>14} {:>14} {:>10.1}",
            r.clients,
            r.topology.to_string(),
            r.policy.to_string(),
            r.protocol.to_string(),
            r.rounds,
            r.tpsi_runs,
            r.tpsi_bytes,
            r.total_bytes,
            r.wall_ms
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ExperimentSpec {
        ExperimentSpec::new(
            DatasetSource::Blobs {
                n: 300,
                d: 6,
                classes: 2,
                separation: 4.0,
                seed: 1,
            },
            3,
            ModelKind::LogisticRegression,
            7,
        )
    }

    #[test]
    fn holdings_split_and_overlap() {
        let mut s = spec();
        s.overlap = 0.8;
        let data = s.dataset.load(3).unwrap();
        let (sets, test) = holdings(&data, &s);
        assert_eq!(test.len(), 90);
        let common: BTreeSet<SampleId> = sets[0]
            .iter()
            .filter(|id| sets.iter().all(|set| set.contains(id)))
            .copied()
            .collect();
        assert!(test.iter().all(|id| !common.contains(id)));
        let union: BTreeSet<SampleId> = sets.iter().flatten().copied().collect();
        assert_eq!(union.len(), 210);
        assert!(common.len() < 210 && common.len() > 130);
    }

    #[test]
    fn baseline_names_round_trip() {
        for b in Baseline::ALL {
            assert_eq!(b.name().parse::<Baseline>().unwrap(), b);
            assert_eq!(spec().baseline(b).config_name(), b.name());
        }
        assert!("TreeXYZ".parse::<Baseline>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(spec().validate().is_ok());
        let mut s = spec();
        s.clients = 1;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.test_fraction = 1.0;
        assert!(s.validate().is_err());
    }
}
