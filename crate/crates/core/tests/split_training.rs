use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use treecss::coreset::{coreset_in_memory, CoresetConfig};
use treecss::data::{
    generate_blobs, generate_linear_regression, generate_planted_clusters, BlobSpec, ClientTable, Label, PlantedSpec,
    SampleId, Task, VerticalDataset,
};
use treecss::train::model::Mat;
use treecss::train::split::{gather_all, step_bytes};
use treecss::train::{
    evaluate, evaluate_model, knn_predict, predict, train_at_lr, train_until_converged, KnnReference, Metric,
    ModelKind, ModelSpec, ParamDump, SplitModel, SplitSession, TrainConfig, TrainError, TrainSet,
};
use treecss::transport::Federation;

mod common;

use common::{central_knn, ids, labels_of, random_dataset, Central};

fn all_kinds() -> Vec<(ModelKind, Task)> {
    vec![
        (ModelKind::LogisticRegression, Task::Classification { classes: 2 }),
        (ModelKind::LogisticRegression, Task::Classification { classes: 3 }),
        (ModelKind::LinearRegression, Task::Regression),
        (ModelKind::Mlp, Task::Classification { classes: 3 }),
        (ModelKind::Mlp, Task::Regression),
    ]
}

#[test]
fn analytic_gradients_match_finite_differences() {
    const STEP: f64 = 1e-5;
    const MAX_REL: f64 = 1e-5;
    for (case, (kind, task)) in all_kinds().into_iter().enumerate() {
        let dims = [2, 3, 1];
        let data = random_dataset(50, &dims, task, 100 + case as u64);
        let all = ids(50);
        let xs = gather_all(&data, &all).unwrap();
        let ys = labels_of(&data, &all);
        let mut rng = ChaCha8Rng::seed_from_u64(case as u64);
        let w: Vec<f64> = (0..50).map(|_| rng.gen_range(0.2..2.0)).collect();
        let mut model = SplitModel::init(ModelSpec::new(kind, dims.to_vec(), task, 4), 9);
        let theta: Vec<f64> = (0..model.num_params())
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        model.set_flat(&theta);
        let (_, grads) = model.loss_and_grad(&xs, &ys, &w);
        let analytic = grads.flat();
        assert_eq!(analytic.len(), theta.len());
        let mut worst = 0.0f64;
        for j in 0..theta.len() {
            let mut probe = model.clone();
            let mut t = theta.clone();
            t[j] = theta[j] + STEP;
            probe.set_flat(&t);
            let up = probe.loss(&xs, &ys, &w);
            t[j] = theta[j] - STEP;
            probe.set_flat(&t);
            let down = probe.loss(&xs, &ys, &w);
            let numeric = (up - down) / (2.0 * STEP);
            let scale = analytic[j].abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((analytic[j] - numeric).abs() / scale);
        }
        println!(
            "{kind} {task:?}: {} params, worst relative gradient error {worst:.2e}",
            theta.len()
        );
        assert!(worst <= MAX_REL, "{kind} {task:?}: {worst}");
    }
}

#[test]
fn doubling_weights_doubles_loss_and_gradients() {
    for (kind, task) in all_kinds() {
        let data = random_dataset(30, &[2, 2], task, 7);
        let all = ids(30);
        let xs = gather_all(&data, &all).unwrap();
        let ys = labels_of(&data, &all);
        let mut model = SplitModel::init(ModelSpec::new(kind, vec![2, 2], task, 4), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta: Vec<f64> = (0..model.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        model.set_flat(&theta);
        let w: Vec<f64> = (0..30).map(|_| rng.gen_range(0.1..3.0)).collect();
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let (l1, g1) = model.loss_and_grad(&xs, &ys, &w);
        let (l2, g2) = model.loss_and_grad(&xs, &ys, &w2);
        assert!((l2 - 2.0 * l1).abs() <= 1e-12 * l1.abs().max(1.0));
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
        }
        let ones = vec![1.0; 30];
        let (lu, _) = model.loss_and_grad(&xs, &ys, &ones);
        // unit weights reduce to the plain sum of per-sample losses
        let per_sample: f64 = (0..30)
            .map(|i| {
                let row: Vec<Mat> = xs.iter().map(|x| Mat::from_rows(&[x.row(i)], x.cols)).collect();
                model.loss(&row, &ys[i..i + 1], &[1.0])
            })
            .sum();
        assert!((lu - per_sample).abs() <= 1e-12 * lu.abs());
    }
}

#[test]
fn all_zero_logistic_loss_is_ln2_times_weight_mass() {
    let mut data = random_dataset(20, &[3, 2], Task::Classification { classes: 2 }, 1);
    for i in 0..20u64 {
        data.labels.insert(SampleId(i), Label::Class((i % 2) as usize));
    }
    let fed = Federation::new(2);
    let set = TrainSet::weighted(ids(20), (0..20).map(|i| 0.5 + i as f64 / 10.0).collect()).unwrap();
    let weights = set.weight_map();
    let spec = ModelSpec::new(ModelKind::LogisticRegression, vec![3, 2], data.task, 16);
    let mut session = SplitSession::new(
        &fed,
        &data,
        &weights,
        SplitModel::init(spec, 0),
        0.1,
        Default::default(),
    )
    .unwrap();
    let loss = session.step(&set.ids).unwrap();
    let mass: f64 = set.weights.iter().sum();
    assert!((loss - std::f64::consts::LN_2 * mass).abs() < 1e-12);
}

#[test]
fn split_steps_equal_central_steps() {
    const TOL: f64 = 1e-9;
    for (case, (kind, task)) in all_kinds().into_iter().enumerate() {
        let dims = vec![3, 2, 4];
        let data = random_dataset(60, &dims, task, 40 + case as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(case as u64);
        let set = TrainSet::weighted(ids(60), (0..60).map(|_| rng.gen_range(0.5..4.0)).collect()).unwrap();
        let weights = set.weight_map();
        let spec = ModelSpec::new(kind, dims.clone(), task, 5);
        let init = SplitModel::init(spec.clone(), 11);
        let mut central = Central::from_dump(&spec, &init.dump());

        let run_split = || {
            let fed = Federation::new(3);
            let mut s = SplitSession::new(&fed, &data, &weights, init.clone(), 0.05, Default::default()).unwrap();
            let mut losses = Vec::new();
            for step in 0..10 {
                let batch: Vec<SampleId> = (0..12).map(|j| SampleId(((step * 7 + j * 5) % 60) as u64)).collect();
                losses.push(s.step(&batch).unwrap());
            }
            (losses, s.finish(&fed))
        };
        let (split_losses, split_model) = run_split();
        let (again_losses, again_model) = run_split();
        assert_eq!(
            split_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(split_model, again_model);

        let mut state = Vec::new();
        let mut worst_loss = 0.0f64;
        for (step, split_loss) in split_losses.iter().enumerate() {
            let batch: Vec<SampleId> = (0..12).map(|j| SampleId(((step * 7 + j * 5) % 60) as u64)).collect();
            let xs: Vec<Vec<f64>> = batch.iter().map(|id| data.concat_row(*id).unwrap()).collect();
            let ys = labels_of(&data, &batch);
            let ws: Vec<f64> = batch.iter().map(|id| weights[id]).collect();
            let (loss, grads) = central.loss_grad(&xs, &ys, &ws);
            worst_loss = worst_loss.max((loss - split_loss).abs());
            central.adam_step(&grads, &mut state, step as i32 + 1, 0.05);
        }
        let expected = Central::from_dump(&spec, &split_model.dump());
        let mut worst_param = 0.0f64;
        for (a, b) in [
            (&central.first, &expected.first),
            (&central.first_bias, &expected.first_bias),
            (&central.w1, &expected.w1),
            (&central.b1, &expected.b1),
            (&central.w2, &expected.w2),
            (&central.b2, &expected.b2),
        ] {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b.iter()) {
                worst_param = worst_param.max((x - y).abs());
            }
        }
        println!("{kind} {task:?}: max |loss diff| {worst_loss:.2e}, max |param diff| {worst_param:.2e}");
        assert!(worst_loss <= TOL && worst_param <= TOL);
    }
}

#[test]
fn step_traffic_is_linear_in_samples() {
    let data = random_dataset(400, &[2, 3, 2, 1], Task::Classification { classes: 3 }, 5);
    for kind in [ModelKind::LogisticRegression, ModelKind::Mlp] {
        let spec = ModelSpec::new(kind, data.client_dims(), data.task, 16);
        let mut per_epoch = Vec::new();
        for (n, fraction) in [(100usize, 0.1), (200, 0.05), (400, 0.025), (400, 0.05)] {
            let fed = Federation::new(4);
            let cfg = TrainConfig {
                lr_grid: vec![0.01],
                batch_fraction: fraction,
                max_epochs: 1,
                ..TrainConfig::default()
            };
            let set = TrainSet::uniform(ids(n));
            train_at_lr(&fed, &data, &set, &spec, 0.01, &cfg).unwrap();
            let bytes = fed.bus.snapshot_stats().total_bytes();
            let b = cfg.batch_size(n);
            assert_eq!(n % b, 0);
            assert_eq!(bytes, (n / b) as u64 * step_bytes(&spec, b));
            per_epoch.push((n, n / b, bytes));
        }
        // ten-sample batches: traffic doubles with the sample count
        assert_eq!(per_epoch[1].2, 2 * per_epoch[0].2);
        assert_eq!(per_epoch[2].2, 4 * per_epoch[0].2);
        // same samples in half as many batches: only the 8-byte headers shrink
        let headers = 8 * 2 * (spec.clients() as u64 + 1);
        assert_eq!(
            per_epoch[2].2 - per_epoch[3].2,
            (per_epoch[2].1 - per_epoch[3].1) as u64 * headers
        );
    }
}

/// Least-squares fit to ±1 targets with an intercept, via normal equations.
fn least_squares_accuracy(data: &VerticalDataset, ids: &[SampleId]) -> f64 {
    let rows: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| {
            let mut r = data.concat_row(*id).unwrap();
            r.push(1.0);
            r
        })
        .collect();
    let t: Vec<f64> = ids
        .iter()
        .map(|id| {
            if data.labels.get(*id).unwrap().class() == Some(1) {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    let p = rows[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (r, y) in rows.iter().zip(&t) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += r[i] * r[j];
            }
            a[i][p] += r[i] * y;
        }
    }
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, piv);
        let pivot = a[col].clone();
        for (row, r) in a.iter_mut().enumerate() {
            if row != col {
                let f = r[col] / pivot[col];
                for (v, pv) in r[col..].iter_mut().zip(&pivot[col..]) {
                    *v -= f * pv;
                }
            }
        }
    }
    let beta: Vec<f64> = (0..p).map(|i| a[i][p] / a[i][i]).collect();
    let hits = rows
        .iter()
        .zip(&t)
        .filter(|(r, y)| r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>().signum() == y.signum())
        .count();
    hits as f64 / rows.len() as f64
}

fn blobs(n: usize, seed: u64) -> VerticalDataset {
    generate_blobs(&BlobSpec {
        n,
        d: 6,
        clients: 3,
        classes: 2,
        separation: 6.0,
        seed,
    })
    .unwrap()
}

#[test]
fn logistic_regression_separates_blobs() {
    let data = blobs(1000, 3);
    let all = ids(1000);
    let reference = least_squares_accuracy(&data, &all);
    let fed = Federation::new(3);
    let cfg = TrainConfig {
        max_epochs: 40,
        ..TrainConfig::default()
    };
    let out = train_until_converged(
        &fed,
        &data,
        &TrainSet::uniform(all.clone()),
        ModelKind::LogisticRegression,
        &cfg,
    )
    .unwrap();
    let acc = out.report.train_metric.value();
    println!(
        "least-squares reference {reference:.4}, split LR {acc:.4}, lr {}, epochs {}",
        out.report.lr, out.report.epochs
    );
    assert!(reference >= 0.99, "blobs not linearly separable enough: {reference}");
    assert!(acc >= 0.99);
    assert_eq!(out.report.loss_curve.len(), out.report.epochs);
    assert_eq!(out.report.grid.len(), 4);
    assert!(out.report.bytes > 0);
}

#[test]
fn metric_recomputes_from_dumped_parameters() {
    let data = blobs(400, 8);
    let (train, test): (Vec<SampleId>, Vec<SampleId>) = ids(400).into_iter().partition(|id| id.0 % 10 < 7);
    let fed = Federation::new(3);
    let cfg = TrainConfig {
        lr_grid: vec![0.1],
        max_epochs: 10,
        ..TrainConfig::default()
    };
    let out = train_until_converged(
        &fed,
        &data,
        &TrainSet::uniform(train),
        ModelKind::LogisticRegression,
        &cfg,
    )
    .unwrap();
    let metric = evaluate_model(&out.model, &data, &test, None).unwrap();
    // offline: logit = concat(x) · stacked bottoms + bias
    let dump: ParamDump = serde_json::from_str(&serde_json::to_string(&out.model.dump()).unwrap()).unwrap();
    let mut w = Vec::new();
    for m in 1..=3 {
        w.extend(
            dump.entries
                .iter()
                .find(|e| e.name == format!("bottom{m}.w"))
                .unwrap()
                .values
                .iter()
                .copied(),
        );
    }
    let bias = dump.entries.iter().find(|e| e.name == "top.bias").unwrap().values[0];
    let hits = test
        .iter()
        .filter(|id| {
            let z: f64 = data
                .concat_row(**id)
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + bias;
            Label::Class((z > 0.0) as usize) == data.labels.get(**id).unwrap()
        })
        .count();
    assert_eq!(metric, Metric::Accuracy(hits as f64 / test.len() as f64));
    let preds = predict(&out.model, &data, &test).unwrap();
    assert_eq!(
        evaluate(data.task, &preds, &labels_of(&data, &test), None).unwrap(),
        metric
    );
}

#[test]
fn zero_epochs_reports_initial_state() {
    let data = blobs(100, 2);
    let fed = Federation::new(3);
    let cfg = TrainConfig {
        max_epochs: 0,
        ..TrainConfig::default()
    };
    let out = train_until_converged(&fed, &data, &TrainSet::uniform(ids(100)), ModelKind::Mlp, &cfg).unwrap();
    assert_eq!(out.report.epochs, 0);
    assert!(out.report.loss_curve.is_empty());
    assert_eq!(out.report.sample_epochs, 0);
    assert_eq!(out.model, SplitModel::init(out.model.spec.clone(), cfg.seed));
    assert_eq!(fed.bus.snapshot_stats().total_bytes(), 0);
}

#[test]
fn training_is_deterministic() {
    let data = blobs(200, 4);
    let cfg = TrainConfig {
        max_epochs: 6,
        seed: 17,
        ..TrainConfig::default()
    };
    let run = || {
        let fed = Federation::new(3);
        let mut out = train_until_converged(&fed, &data, &TrainSet::uniform(ids(200)), ModelKind::Mlp, &cfg).unwrap();
        out.report.wall_ms = 0.0;
        (out.report, out.model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let json = a.to_json();
    assert_eq!(serde_json::from_str::<treecss::train::TrainReport>(&json).unwrap(), a);
}

#[test]
fn coreset_weights_and_unit_weights_both_converge() {
    let data = generate_planted_clusters(&PlantedSpec {
        n: 600,
        clients: 2,
        dim_per_client: 3,
        clusters: 4,
        classes: 2,
        spread: 0.5,
        seed: 12,
    })
    .unwrap();
    let (selection, _, _) = coreset_in_memory(&data, &ids(600), &CoresetConfig::new(4, 1)).unwrap();
    let weighted = TrainSet::weighted(selection.ids.clone(), selection.weights.clone()).unwrap();
    let cfg = TrainConfig {
        lr_grid: vec![0.1],
        batch_fraction: 1.0,
        max_epochs: 3000,
        ..TrainConfig::default()
    };
    let fed = Federation::new(2);
    let w = train_until_converged(&fed, &data, &weighted, ModelKind::LogisticRegression, &cfg).unwrap();
    let u = train_until_converged(
        &fed,
        &data,
        &weighted.unit_weights(),
        ModelKind::LogisticRegression,
        &cfg,
    )
    .unwrap();
    println!("weighted: {} epochs, unit: {} epochs", w.report.epochs, u.report.epochs);
    assert!(w.report.converged && u.report.converged);
    assert_ne!(w.report.loss_curve, u.report.loss_curve);
}

#[test]
fn divergence_names_the_learning_rate() {
    let base = generate_linear_regression(200, 4, 2, 0.1, 3).unwrap();
    let mut data = base.clone();
    for t in &mut data.clients {
        let mut scaled = ClientTable::new(t.client(), t.dim());
        for (id, row) in t.rows() {
            scaled.insert(id, row.iter().map(|v| v * 1e6).collect()).unwrap();
        }
        *t = scaled;
    }
    let fed = Federation::new(2);
    let cfg = TrainConfig {
        lr_grid: vec![1.0],
        max_epochs: 5,
        ..TrainConfig::default()
    };
    match train_until_converged(
        &fed,
        &data,
        &TrainSet::uniform(ids(200)),
        ModelKind::LinearRegression,
        &cfg,
    ) {
        Err(e @ TrainError::Diverged { lr, .. }) => {
            assert_eq!(lr, 1.0);
            assert!(e.to_string().contains("lr 1"));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.report)),
    }
    let cfg = TrainConfig {
        lr_grid: vec![1.0, 2.0],
        ..cfg
    };
    assert!(matches!(
        train_until_converged(
            &fed,
            &data,
            &TrainSet::uniform(ids(200)),
            ModelKind::LinearRegression,
            &cfg
        ),
        Err(TrainError::AllDiverged)
    ));
}

#[test]
fn missing_and_empty_inputs_are_rejected() {
    let data = blobs(50, 1);
    let fed = Federation::new(3);
    let cfg = TrainConfig {
        lr_grid: vec![0.1],
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let mut with_stranger = ids(50);
    with_stranger.push(SampleId(999));
    assert!(matches!(
        train_until_converged(
            &fed,
            &data,
            &TrainSet::uniform(with_stranger),
            ModelKind::LogisticRegression,
            &cfg
        ),
        Err(TrainError::MissingSample {
            id: SampleId(999),
            client: 1
        })
    ));
    assert!(matches!(
        train_until_converged(&fed, &data, &TrainSet::uniform(vec![]), ModelKind::Mlp, &cfg),
        Err(TrainError::EmptyData)
    ));
}

#[test]
fn split_knn_matches_central_knn() {
    let data = generate_blobs(&BlobSpec {
        n: 50,
        d: 4,
        clients: 2,
        classes: 2,
        separation: 1.5,
        seed: 21,
    })
    .unwrap();
    let fed = Federation::new(2);
    let all = ids(50);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for weighted in [false, true] {
        let refs = KnnReference {
            ids: all[..35].to_vec(),
            weights: (0..35)
                .map(|_| if weighted { rng.gen_range(0.5..3.0) } else { 1.0 })
                .collect(),
        };
        for k in [1, 3, 5, 8] {
            let got = knn_predict(&fed, &data, &refs, &all, k).unwrap();
            for (q, g) in all.iter().zip(&got) {
                assert_eq!(*g, central_knn(&data, &refs, *q, k), "query {q} k {k}");
            }
        }
    }
    // a reference queried against itself, k = 1
    let refs = KnnReference {
        ids: all.clone(),
        weights: vec![1.0; 50],
    };
    let got = knn_predict(&fed, &data, &refs, &all, 1).unwrap();
    assert_eq!(got, labels_of(&data, &all));
    // k = |refs| with unit weights is the global majority (25/25 tie -> label 0)
    let got = knn_predict(&fed, &data, &refs, &all[..3], 50).unwrap();
    assert!(got.iter().all(|l| *l == Label::Class(0)));
    assert!(matches!(
        knn_predict(
            &fed,
            &data,
            &KnnReference {
                ids: vec![],
                weights: vec![]
            },
            &all,
            1
        ),
        Err(TrainError::EmptyData)
    ));
}

#[test]
fn knn_sends_one_scalar_per_reference() {
    let data = blobs(40, 6);
    let fed = Federation::new(3);
    let refs = KnnReference {
        ids: ids(30),
        weights: vec![1.0; 30],
    };
    knn_predict(&fed, &data, &refs, &ids(40)[30..], 3).unwrap();
    let stats = fed.bus.snapshot_stats();
    assert_eq!(stats.total_bytes(), 10 * 3 * (4 + 8 * 30));
    assert_eq!(stats.message_count, 30);
}

#[test]
fn mat_codec_round_trip() {
    let m = Mat {
        rows: 2,
        cols: 3,
        data: vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, 1e300],
    };
    let bytes = treecss::train::split::encode_mat(&m);
    assert_eq!(bytes.len(), 8 + 48);
    assert_eq!(treecss::train::split::decode_mat(&bytes).unwrap(), m);
    assert!(treecss::train::split::decode_mat(&bytes[..20]).is_err());
}
