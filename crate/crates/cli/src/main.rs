use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use treecss::coreset::{build_coreset, CoresetConfig, CoresetSelection};
use treecss::crypto::SealingKeyPair;
use treecss::data::{synthesize_id_sets, synthesize_skewed_id_sets, TaskKind};
use treecss::harness::{
    append_jsonl, emit_report, psi_bench, psi_table, read_jsonl, run_and_record, split_ids, Baseline, DatasetSource,
    ExperimentSpec, RunRecord,
};
use treecss::mpsi::{SchedulePolicy, Topology};
use treecss::tpsi::{TpsiConfig, TpsiProtocol};
use treecss::train::{evaluate_model, train_until_converged, ModelKind, TrainConfig, TrainSet};
use treecss::transport::Federation;

#[derive(Parser)]
#[command(
    name = "treecss",
    version,
    about = "Vertical federated learning pipeline: multi-party PSI, cluster coresets, split training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep topology, policy and protocol over synthetic id sets.
    PsiBench(PsiBenchArgs),
    /// Build a coreset over a dataset's training split.
    Coreset(CoresetArgs),
    /// Train on a dataset's training split, or on a coreset file.
    Train(TrainArgs),
    /// Alignment, coreset and training in one run; appends a JSON-lines record.
    E2e(E2eArgs),
    /// Comparison table from JSON-lines run records.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceKind {
    Blobs,
    Planted,
    Linear,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Regression,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    dataset: SourceKind,
    /// Sample count for synthetic data.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Feature count (blobs, linear).
    #[arg(long, default_value_t = 12)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Blob center distance in noise standard deviations.
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Planted clusters per client.
    #[arg(long, default_value_t = 4)]
    planted_clusters: usize,
    #[arg(long, default_value_t = 3)]
    dim_per_client: usize,
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    /// Label noise standard deviation (linear).
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, required_if_eq("dataset", "csv"))]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    label: String,
    #[arg(long, value_enum, default_value = "classification")]
    task: TaskArg,
    /// Seed for synthetic data; defaults to the run seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DatasetArgs {
    fn source(&self, seed: u64) -> Result<DatasetSource> {
        let seed = self.data_seed.unwrap_or(seed);
        Ok(match self.dataset {
            SourceKind::Blobs => DatasetSource::Blobs {
                n: self.n,
                d: self.dim,
                classes: self.classes,
                separation: self.separation,
                seed,
            },
            SourceKind::Planted => DatasetSource::Planted {
                n: self.n,
                dim_per_client: self.dim_per_client,
                clusters: self.planted_clusters,
                classes: self.classes,
                spread: self.spread,
                seed,
            },
            SourceKind::Linear => DatasetSource::Linear {
                n: self.n,
                d: self.dim,
                noise: self.noise,
                seed,
            },
            SourceKind::Csv => DatasetSource::Csv {
                path: self.csv.clone().context("--csv is required for --dataset csv")?,
                label: self.label.clone(),
                task: match self.task {
                    TaskArg::Classification => TaskKind::Classification,
                    TaskArg::Regression => TaskKind::Regression,
                },
            },
        })
    }
}

#[derive(Args)]
struct TrainingArgs {
    #[arg(long, default_value = "lr")]
    model: ModelKind,
    /// Learning rates to search; repeat the flag or separate with commas.
    #[arg(long = "lr", value_delimiter = ',', default_values_t = [1.0, 0.1, 0.01, 0.001])]
    lr: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    batch_fraction: f64,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    /// Neighbors for the KNN model.
    #[arg(long, default_value_t = 5)]
    k: usize,
}

impl TrainingArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr_grid: self.lr.clone(),
            batch_fraction: self.batch_fraction,
            max_epochs: self.max_epochs,
            hidden: self.hidden,
            ..TrainConfig::default()
        }
        .with_seed(seed)
    }
}

#[derive(Args)]
struct PsiBenchArgs {
    /// Client counts to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 8])]
    clients: Vec<usize>,
    /// Ids per client (uniform sets).
    #[arg(long, default_value_t = 2000)]
    set_size: usize,
    /// Share of ids common to every client (uniform sets).
    #[arg(long, default_value_t = 0.7)]
    overlap: f64,
    /// Skewed sets instead: client i holds `skew_step * i` ids, `common` shared.
    #[arg(long)]
    skew_step: Option<usize>,
    #[arg(long, default_value_t = 700)]
    common: usize,
    #[arg(long, value_delimiter = ',', default_values_t = Topology::ALL)]
    topology: Vec<Topology>,
    #[arg(long, value_delimiter = ',', default_values_t = SchedulePolicy::ALL)]
    policy: Vec<SchedulePolicy>,
    #[arg(long, value_delimiter = ',', default_values_t = TpsiProtocol::ALL)]
    protocol: Vec<TpsiProtocol>,
    #[arg(long, default_value_t = 2048)]
    rsa_bits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines file to append one record per run to.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CoresetArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, default_value_t = 3)]
    clients: usize,
    /// Clusters per client.
    #[arg(long, short = 'c', default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `sample_id,global_weight` CSV output.
    #[arg(long, default_value = "coreset.csv")]
    out: PathBuf,
    /// Construction report JSON output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    train: TrainingArgs,
    #[arg(long, default_value_t = 3)]
    clients: usize,
    /// Train on this coreset (from the `coreset` subcommand) instead of the full split.
    #[arg(long)]
    coreset: Option<PathBuf>,
    /// Ignore coreset weights.
    #[arg(long)]
    unit_weights: bool,
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TrainReport JSON output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Parameter dump (flat arrays plus shapes) JSON output.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct E2eArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    train: TrainingArgs,
    #[arg(long, default_value_t = 3)]
    clients: usize,
    /// One of StarALL, TreeALL, StarCSS, TreeCSS; overrides topology, policy and coreset flags.
    #[arg(long)]
    config: Option<Baseline>,
    #[arg(long, default_value = "tree")]
    topology: Topology,
    #[arg(long, default_value = "volume_aware")]
    policy: SchedulePolicy,
    #[arg(long, default_value = "oprf")]
    protocol: TpsiProtocol,
    #[arg(long, default_value_t = 2048)]
    rsa_bits: usize,
    #[arg(long)]
    no_coreset: bool,
    #[arg(long, short = 'c', default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = 1.0)]
    overlap: f64,
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "runs.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON-lines files written by `e2e`.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    /// Also write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn write_json<T: serde::Serialize>(path: &PathBuf, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn psi_bench_cmd(a: PsiBenchArgs) -> Result<()> {
    let mut combos = Vec::new();
    for &t in &a.topology {
        for &p in &a.policy {
            for &proto in &a.protocol {
                combos.push((t, p, proto));
            }
        }
    }
    let mut all = Vec::new();
    for &m in &a.clients {
        let sets = match a.skew_step {
            Some(step) => synthesize_skewed_id_sets(&(1..=m).map(|i| step * i).collect::<Vec<_>>(), a.common, a.seed)?,
            None => synthesize_id_sets(a.set_size, m, a.overlap, a.seed)?,
        };
        let records = psi_bench(&sets, &combos, TpsiConfig::with_rsa_bits(a.rsa_bits), a.seed)?;
        if let Some(out) = &a.out {
            for r in &records {
                append_jsonl(out, r)?;
            }
        }
        all.extend(records);
    }
    print!("{}", psi_table(&all));
    Ok(())
}

fn coreset_cmd(a: CoresetArgs) -> Result<()> {
    let data = a.data.source(a.seed)?.load(a.clients)?;
    let (pool, _) = split_ids(&data, a.test_fraction, a.seed);
    let fed = Federation::new(a.clients);
    let keys = SealingKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(a.seed));
    let out = build_coreset(&fed, &data, &pool, &keys, &CoresetConfig::new(a.clusters, a.seed))?;
    out.selection
        .write_csv(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?)?;
    if let Some(path) = &a.report {
        write_json(path, &out.report)?;
    }
    println!("{}", serde_json::to_string(&out.report)?);
    println!("coreset bytes: {}", out.stats.total_bytes());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    if a.train.model == ModelKind::Knn {
        bail!("`train` fits parametric models; run knn through `e2e`");
    }
    let data = a.data.source(a.seed)?.load(a.clients)?;
    let (pool, test) = split_ids(&data, a.test_fraction, a.seed);
    let set = match &a.coreset {
        Some(path) => {
            let sel =
                CoresetSelection::read_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?)?;
            let set = TrainSet::weighted(sel.ids, sel.weights)?;
            if a.unit_weights {
                set.unit_weights()
            } else {
                set
            }
        }
        None => TrainSet::uniform(pool),
    };
    let fed = Federation::new(a.clients);
    let mut out = train_until_converged(&fed, &data, &set, a.train.model, &a.train.config(a.seed))?;
    out.report.test_metric = Some(evaluate_model(&out.model, &data, &test, None)?);
    if let Some(path) = &a.report {
        write_json(path, &out.report)?;
    }
    if let Some(path) = &a.params {
        write_json(path, &out.model.dump())?;
    }
    let r = &out.report;
    println!(
        "{} on {} samples: lr {}, {} epochs, train {:?}, test {:?}, {} bytes",
        r.model, r.samples, r.lr, r.epochs, r.train_metric, r.test_metric, r.bytes
    );
    Ok(())
}

fn e2e_cmd(a: E2eArgs) -> Result<()> {
    let mut spec = ExperimentSpec::new(a.data.source(a.seed)?, a.clients, a.train.model, a.seed);
    spec.topology = a.topology;
    spec.policy = a.policy;
    spec.use_coreset = !a.no_coreset;
    if let Some(b) = a.config {
        spec = spec.baseline(b);
    }
    spec.protocol = a.protocol;
    spec.rsa_bits = a.rsa_bits;
    spec.clusters = a.clusters;
    spec.overlap = a.overlap;
    spec.test_fraction = a.test_fraction;
    spec.knn_k = a.train.k;
    spec.train = a.train.config(a.seed);
    let r = run_and_record(&spec, &a.out)?;
    println!(
        "{} {} {}: aligned {}, train data {}, test {} {:.4}, bytes psi {} coreset {} train {}, {:.0} ms",
        r.config,
        r.dataset,
        r.spec.model,
        r.aligned,
        r.train_data,
        r.test_metric.name(),
        r.test_metric.value(),
        r.psi.total_bytes(),
        r.coreset.as_ref().map_or(0, |c| c.total_bytes()),
        r.train.total_bytes(),
        r.wall_ms
    );
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mut records: Vec<RunRecord> = Vec::new();
    for path in &a.records {
        records.extend(read_jsonl::<RunRecord>(path).with_context(|| format!("reading {}", path.display()))?);
    }
    if records.is_empty() {
        bail!("no records");
    }
    let report = emit_report(&records);
    print!("{}", report.to_text());
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::PsiBench(a) => psi_bench_cmd(a),
        Command::Coreset(a) => coreset_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::E2e(a) => e2e_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}
