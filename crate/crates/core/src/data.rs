//! Domain data model: sample identifiers, per-client feature tables, labels,
//! CSV ingestion, vertical partitioning and synthetic generators.
//!
//! Everything here is immutable once built and can be shared read-only
//! between participant threads.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing label column '{0}'")]
    MissingLabelColumn(String),
    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    Parse { row: usize, column: String, value: String },
    #[error("empty file")]
    Empty,
    #[error("row {row}: non-finite value in column '{column}'")]
    NonFinite { row: usize, column: String },
    #[error("row {row}: classification label {value} is not a non-negative integer")]
    BadClassLabel { row: usize, value: f64 },
    #[error("feature dimension mismatch: table has {expected}, row has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("duplicate sample id {0}")]
    DuplicateId(SampleId),
    #[error("sample {id} missing from client {client}")]
    MissingSample { id: SampleId, client: usize },
    #[error("cannot partition {features} features over {clients} clients")]
    TooManyClients { clients: usize, features: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Opaque sample indicator. Ordered numerically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub u64);

impl SampleId {
    pub fn to_le_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(bytes: [u8; 8]) -> Self {
        SampleId(u64::from_le_bytes(bytes))
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for SampleId {
    fn from(v: u64) -> Self {
        SampleId(v)
    }
}

pub type FeatureVector = Vec<f64>;

/// One client's vertical slice: every row has exactly `dim` finite features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientTable {
    client: usize,
    dim: usize,
    rows: BTreeMap<SampleId, FeatureVector>,
}

impl ClientTable {
    /// `client` is the 1-based client index.
    pub fn new(client: usize, dim: usize) -> Self {
        ClientTable {
            client,
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: SampleId, features: FeatureVector) -> Result<(), DataError> {
        if features.len() != self.dim {
            return Err(DataError::DimMismatch {
                expected: self.dim,
                got: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                row: id.0 as usize,
                column: String::from("?"),
            });
        }
        if self.rows.insert(id, features).is_some() {
            return Err(DataError::DuplicateId(id));
        }
        Ok(())
    }

    pub fn client(&self) -> usize {
        self.client
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: SampleId) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }

    /// Row lookup that reports which client is missing the id.
    pub fn row(&self, id: SampleId) -> Result<&[f64], DataError> {
        self.get(id).ok_or(DataError::MissingSample {
            id,
            client: self.client,
        })
    }

    /// Ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.rows.keys().copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = (SampleId, &[f64])> + '_ {
        self.rows.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn restrict(&self, ids: &[SampleId]) -> Result<ClientTable, DataError> {
        let mut out = ClientTable::new(self.client, self.dim);
        for &id in ids {
            out.rows.insert(id, self.row(id)?.to_vec());
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }

    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

impl Task {
    pub fn is_classification(self) -> bool {
        matches!(self, Task::Classification { .. })
    }
}

/// Task kind requested at ingestion; the class count is discovered from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Labels, held by the label owner only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelTable {
    rows: BTreeMap<SampleId, Label>,
}

impl LabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: SampleId, label: Label) {
        self.rows.insert(id, label);
    }

    pub fn get(&self, id: SampleId) -> Option<Label> {
        self.rows.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.rows.keys().copied()
    }

    pub fn restrict(&self, ids: &[SampleId]) -> LabelTable {
        LabelTable {
            rows: ids
                .iter()
                .filter_map(|id| self.rows.get(id).map(|l| (*id, *l)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerticalDataset {
    pub clients: Vec<ClientTable>,
    pub labels: LabelTable,
    pub task: Task,
}

impl VerticalDataset {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn num_features(&self) -> usize {
        self.clients.iter().map(ClientTable::dim).sum()
    }

    pub fn client_dims(&self) -> Vec<usize> {
        self.clients.iter().map(ClientTable::dim).collect()
    }

    /// Concatenation of every client's slice for `id`, in client order.
    pub fn concat_row(&self, id: SampleId) -> Result<FeatureVector, DataError> {
        let mut out = Vec::with_capacity(self.num_features());
        for table in &self.clients {
            out.extend_from_slice(table.row(id)?);
        }
        Ok(out)
    }

    /// Ids held by client `m` (0-based position in `clients`).
    pub fn client_ids(&self, m: usize) -> Vec<SampleId> {
        self.clients[m].ids().collect()
    }

    pub fn restrict(&self, ids: &[SampleId]) -> Result<VerticalDataset, DataError> {
        Ok(VerticalDataset {
            clients: self.clients.iter().map(|t| t.restrict(ids)).collect::<Result<_, _>>()?,
            labels: self.labels.restrict(ids),
            task: self.task,
        })
    }

    /// Debug dump: `sample_id,c1_f0,...,cM_f{d-1},label` for ids held by every client.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::from("sample_id")];
        for t in &self.clients {
            header.extend((0..t.dim()).map(|j| format!("c{}_f{}", t.client(), j)));
        }
        header.push(String::from("label"));
        w.write_record(&header)?;
        for id in self.clients[0].ids() {
            let Ok(row) = self.concat_row(id) else { continue };
            let mut rec = vec![id.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(
                self.labels
                    .get(id)
                    .map(|l| match l {
                        Label::Class(c) => c.to_string(),
                        Label::Value(v) => v.to_string(),
                    })
                    .unwrap_or_default(),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn load_csv_dataset(
    path: impl AsRef<Path>,
    label_column: &str,
    task: TaskKind,
) -> Result<VerticalDataset, DataError> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, label_column, task)
}

/// Reads a header-first numeric CSV into a single-client dataset. Sample ids
/// are assigned from row order; classification labels are re-indexed densely
/// from 0 in ascending order of their raw values.
pub fn load_csv_reader<R: Read>(input: R, label_column: &str, task: TaskKind) -> Result<VerticalDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = match reader.headers() {
        Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.clone(),
        Ok(_) => return Err(DataError::Empty),
        Err(e) => return Err(e.into()),
    };
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::MissingLabelColumn(label_column.to_owned()))?;
    let dim = headers.len() - 1;

    let mut table = ClientTable::new(1, dim);
    let mut raw_labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let mut features = Vec::with_capacity(dim);
        let mut label = 0.0;
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| DataError::Parse {
                row,
                column: headers[col].to_owned(),
                value: cell.to_owned(),
            })?;
            if !value.is_finite() {
                return Err(DataError::NonFinite {
                    row,
                    column: headers[col].to_owned(),
                });
            }
            if col == label_idx {
                label = value;
            } else {
                features.push(value);
            }
        }
        let id = SampleId(row as u64);
        table.insert(id, features)?;
        raw_labels.push((id, row, label));
    }
    if raw_labels.is_empty() {
        return Err(DataError::Empty);
    }

    let mut labels = LabelTable::new();
    let task = match task {
        TaskKind::Regression => {
            for (id, _, v) in raw_labels {
                labels.insert(id, Label::Value(v));
            }
            Task::Regression
        }
        TaskKind::Classification => {
            let mut distinct = BTreeSet::new();
            for &(_, row, v) in &raw_labels {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(DataError::BadClassLabel { row, value: v });
                }
                distinct.insert(v as u64);
            }
            let index: BTreeMap<u64, usize> = distinct.iter().enumerate().map(|(i, v)| (*v, i)).collect();
            for (id, _, v) in raw_labels {
                labels.insert(id, Label::Class(index[&(v as u64)]));
            }
            Task::Classification { classes: index.len() }
        }
    };
    Ok(VerticalDataset {
        clients: vec![table],
        labels,
        task,
    })
}

/// Splits a single-client dataset into `clients` contiguous feature blocks.
/// The first `d % clients` blocks get one extra column.
pub fn vertical_partition(ds: &VerticalDataset, clients: usize) -> Result<VerticalDataset, DataError> {
    if ds.clients.len() != 1 {
        return Err(DataError::InvalidParameter(format!(
            "expected a single-client dataset, got {} clients",
            ds.clients.len()
        )));
    }
    let source = &ds.clients[0];
    let d = source.dim();
    if clients == 0 || clients > d {
        return Err(DataError::TooManyClients { clients, features: d });
    }
    let dims = block_sizes(d, clients);
    let mut tables: Vec<ClientTable> = dims
        .iter()
        .enumerate()
        .map(|(m, &dm)| ClientTable::new(m + 1, dm))
        .collect();
    for (id, row) in source.rows() {
        let mut start = 0;
        for (table, &dm) in tables.iter_mut().zip(&dims) {
            table.rows.insert(id, row[start..start + dm].to_vec());
            start += dm;
        }
    }
    Ok(VerticalDataset {
        clients: tables,
        labels: ds.labels.clone(),
        task: ds.task,
    })
}

pub fn block_sizes(d: usize, clients: usize) -> Vec<usize> {
    let base = d / clients;
    let extra = d % clients;
    (0..clients).map(|m| base + usize::from(m < extra)).collect()
}

/// `ceil(overlap * n)` without the float noise that turns 0.7 * 10 into 8.
fn planted_count(overlap: f64, n: usize) -> usize {
    let exact = overlap * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

fn fresh_ids(rng: &mut ChaCha20Rng, used: &mut HashSet<u64>, count: usize) -> Vec<SampleId> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: u64 = rng.gen();
        if used.insert(v) {
            out.push(SampleId(v));
        }
    }
    out
}

/// `clients` id sets of `n_base` ids each, sharing exactly `ceil(overlap * n_base)`
/// ids; the rest are private to each set. Each set is returned shuffled.
pub fn synthesize_id_sets(
    n_base: usize,
    clients: usize,
    overlap: f64,
    seed: u64,
) -> Result<Vec<Vec<SampleId>>, DataError> {
    if !(overlap > 0.0 && overlap <= 1.0) {
        return Err(DataError::InvalidParameter(format!("overlap {overlap} not in (0, 1]")));
    }
    let common = planted_count(overlap, n_base);
    if common < 1 {
        return Err(DataError::InvalidParameter(String::from(
            "overlap * n_base must be at least 1",
        )));
    }
    synthesize_skewed_id_sets(&vec![n_base; clients], common, seed)
}

/// Like [`synthesize_id_sets`] but with per-client sizes; `common` ids are
/// shared by every set.
pub fn synthesize_skewed_id_sets(sizes: &[usize], common: usize, seed: u64) -> Result<Vec<Vec<SampleId>>, DataError> {
    if sizes.is_empty() {
        return Err(DataError::InvalidParameter(String::from("no clients")));
    }
    if let Some(&smallest) = sizes.iter().min() {
        if common > smallest {
            return Err(DataError::InvalidParameter(format!(
                "common size {common} exceeds smallest set {smallest}"
            )));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let shared = fresh_ids(&mut rng, &mut used, common);
    let mut sets = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut set = shared.clone();
        set.extend(fresh_ids(&mut rng, &mut used, size - common));
        set.shuffle(&mut rng);
        sets.push(set);
    }
    Ok(sets)
}

/// Parameters for [`generate_blobs`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n: usize,
    pub d: usize,
    pub clients: usize,
    pub classes: usize,
    /// Distance between class centers in units of the noise standard deviation.
    pub separation: f64,
    pub seed: u64,
}

/// One isotropic unit-variance Gaussian per class; class centers are pairwise
/// `separation` apart when `classes <= d`. Sample `i` has class `i % classes`.
pub fn generate_blobs(spec: &BlobSpec) -> Result<VerticalDataset, DataError> {
    let BlobSpec {
        n,
        d,
        clients,
        classes,
        separation,
        seed,
    } = *spec;
    if classes == 0 || n < classes {
        return Err(DataError::InvalidParameter(format!(
            "need n >= classes >= 1, got n={n}, classes={classes}"
        )));
    }
    if clients == 0 || d < clients {
        return Err(DataError::TooManyClients { clients, features: d });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let centers = class_centers(&mut rng, classes, d, separation);
    let mut table = ClientTable::new(1, d);
    let mut labels = LabelTable::new();
    for i in 0..n {
        let class = i % classes;
        let row: Vec<f64> = centers[class]
            .iter()
            .map(|c| c + rng.sample::<f64, _>(StandardNormal))
            .collect();
        table.rows.insert(SampleId(i as u64), row);
        labels.insert(SampleId(i as u64), Label::Class(class));
    }
    let single = VerticalDataset {
        clients: vec![table],
        labels,
        task: Task::Classification { classes },
    };
    vertical_partition(&single, clients)
}

fn class_centers(rng: &mut ChaCha20Rng, classes: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    // Orthonormal directions scaled by sep/sqrt(2) are pairwise `sep` apart.
    let scale = separation / std::f64::consts::SQRT_2;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if basis.len() < d {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * scale).collect())
        .collect()
}

/// Parameters for [`generate_planted_clusters`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub n: usize,
    pub clients: usize,
    pub dim_per_client: usize,
    /// Planted clusters per client.
    pub clusters: usize,
    pub classes: usize,
    /// Noise standard deviation; cluster centers sit on a grid with spacing 10.
    pub spread: f64,
    pub seed: u64,
}

/// Each client's slice is drawn from exactly `clusters` tight, well-separated
/// clusters, chosen independently per client; the class is drawn uniformly.
pub fn generate_planted_clusters(spec: &PlantedSpec) -> Result<VerticalDataset, DataError> {
    let PlantedSpec {
        n,
        clients,
        dim_per_client,
        clusters,
        classes,
        spread,
        seed,
    } = *spec;
    if n == 0 || clients == 0 || dim_per_client == 0 || clusters == 0 || classes == 0 {
        return Err(DataError::InvalidParameter(String::from(
            "planted cluster parameters must be positive",
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let centers: Vec<Vec<Vec<f64>>> = (0..clients)
        .map(|_| {
            (0..clusters)
                .map(|k| {
                    (0..dim_per_client)
                        .map(|j| {
                            if j == 0 {
                                10.0 * k as f64
                            } else {
                                rng.gen_range(-1.0..1.0)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut tables: Vec<ClientTable> = (0..clients).map(|m| ClientTable::new(m + 1, dim_per_client)).collect();
    let mut labels = LabelTable::new();
    for i in 0..n {
        let id = SampleId(i as u64);
        for (m, table) in tables.iter_mut().enumerate() {
            let k = rng.gen_range(0..clusters);
            let row = centers[m][k]
                .iter()
                .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            table.rows.insert(id, row);
        }
        labels.insert(id, Label::Class(rng.gen_range(0..classes)));
    }
    Ok(VerticalDataset {
        clients: tables,
        labels,
        task: Task::Classification { classes },
    })
}

/// Linear-regression data: `y = <w, x> + noise`, with `w` drawn once from N(0,1).
pub fn generate_linear_regression(
    n: usize,
    d: usize,
    clients: usize,
    noise: f64,
    seed: u64,
) -> Result<VerticalDataset, DataError> {
    if n == 0 {
        return Err(DataError::InvalidParameter(String::from("n must be positive")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut table = ClientTable::new(1, d);
    let mut labels = LabelTable::new();
    for i in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + noise * rng.sample::<f64, _>(StandardNormal);
        table.rows.insert(SampleId(i as u64), x);
        labels.insert(SampleId(i as u64), Label::Value(y));
    }
    vertical_partition(
        &VerticalDataset {
            clients: vec![table],
            labels,
            task: Task::Regression,
        },
        clients,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn csv(text: &str, task: TaskKind) -> Result<VerticalDataset, DataError> {
        load_csv_reader(text.as_bytes(), "y", task)
    }

    #[test]
    fn csv_three_rows() {
        let ds = csv("a,b,y\n1,2,0\n3,4,1\n5,6,0\n", TaskKind::Classification).unwrap();
        assert_eq!(ds.clients.len(), 1);
        assert_eq!(ds.clients[0].len(), 3);
        assert_eq!(ds.clients[0].dim(), 2);
        assert_eq!(ds.labels.len(), 3);
        assert_eq!(ds.clients[0].get(SampleId(1)), Some(&[3.0, 4.0][..]));
        assert_eq!(ds.labels.get(SampleId(1)), Some(Label::Class(1)));
        assert_eq!(ds.task, Task::Classification { classes: 2 });
    }

    #[test]
    fn csv_missing_label_column() {
        let err = csv("a,b,z\n1,2,0\n", TaskKind::Classification).unwrap_err();
        assert!(err.to_string().contains("missing label column"), "{err}");
    }

    #[test]
    fn csv_parse_error_names_row_and_column() {
        let err = csv("a,b,y\n1,2,0\n1,abc,1\n", TaskKind::Classification).unwrap_err();
        match err {
            DataError::Parse { row, column, value } => {
                assert_eq!(row, 1);
                assert_eq!(column, "b");
                assert_eq!(value, "abc");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_empty() {
        assert!(matches!(csv("", TaskKind::Regression), Err(DataError::Empty)));
        assert!(matches!(csv("a,y\n", TaskKind::Regression), Err(DataError::Empty)));
    }

    #[test]
    fn csv_labels_reindexed_densely() {
        let ds = csv("a,y\n1,7\n2,3\n3,7\n", TaskKind::Classification).unwrap();
        assert_eq!(ds.labels.get(SampleId(0)), Some(Label::Class(1)));
        assert_eq!(ds.labels.get(SampleId(1)), Some(Label::Class(0)));
    }

    #[test]
    fn csv_dump_round_trip() {
        let ds = generate_blobs(&BlobSpec {
            n: 6,
            d: 3,
            clients: 1,
            classes: 2,
            separation: 3.0,
            seed: 4,
        })
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = load_csv_reader(buf.as_slice(), "label", TaskKind::Classification).unwrap();
        // sample_id column comes back as a feature
        assert_eq!(back.clients[0].dim(), 4);
        for (id, row) in back.clients[0].rows() {
            assert_eq!(row[0], id.0 as f64);
            assert_eq!(&row[1..], ds.clients[0].get(id).unwrap());
        }
    }

    #[test]
    fn partition_block_arithmetic() {
        assert_eq!(block_sizes(11, 3), vec![4, 4, 3]);
        let single = generate_blobs(&BlobSpec {
            n: 5,
            d: 4,
            clients: 1,
            classes: 1,
            separation: 1.0,
            seed: 1,
        })
        .unwrap();
        let same = vertical_partition(&single, 1).unwrap();
        assert_eq!(same, single);
        let tiny = generate_blobs(&BlobSpec {
            n: 2,
            d: 2,
            clients: 1,
            classes: 2,
            separation: 1.0,
            seed: 1,
        })
        .unwrap();
        assert!(matches!(
            vertical_partition(&tiny, 3),
            Err(DataError::TooManyClients { .. })
        ));
    }

    #[test]
    fn id_sets_seventy_percent() {
        let sets = synthesize_id_sets(10, 3, 0.7, 9).unwrap();
        let as_sets: Vec<HashSet<SampleId>> = sets.iter().map(|s| s.iter().copied().collect()).collect();
        for a in 0..3 {
            assert_eq!(sets[a].len(), 10);
            for b in a + 1..3 {
                assert_eq!(as_sets[a].intersection(&as_sets[b]).count(), 7);
            }
        }
        let all: Vec<_> = as_sets[0]
            .iter()
            .filter(|x| as_sets[1].contains(x) && as_sets[2].contains(x))
            .collect();
        assert_eq!(all.len(), 7);
    }

    #[test]
    fn id_sets_full_overlap_and_half() {
        let sets = synthesize_id_sets(20, 4, 1.0, 1).unwrap();
        let first: BTreeSet<_> = sets[0].iter().collect();
        for s in &sets {
            assert_eq!(s.iter().collect::<BTreeSet<_>>(), first);
        }
        let sets = synthesize_id_sets(100, 2, 0.5, 2).unwrap();
        let a: HashSet<_> = sets[0].iter().collect();
        assert_eq!(sets[1].iter().filter(|x| a.contains(x)).count(), 50);
    }

    #[test]
    fn id_sets_are_shuffled() {
        let sets = synthesize_id_sets(200, 2, 0.5, 3).unwrap();
        // the common prefix would be identical without shuffling
        assert_ne!(sets[0][..100], sets[1][..100]);
    }

    #[test]
    fn blobs_minimum_and_determinism() {
        let spec = BlobSpec {
            n: 2,
            d: 2,
            clients: 2,
            classes: 2,
            separation: 6.0,
            seed: 11,
        };
        let ds = generate_blobs(&spec).unwrap();
        assert_eq!(ds.labels.get(SampleId(0)), Some(Label::Class(0)));
        assert_eq!(ds.labels.get(SampleId(1)), Some(Label::Class(1)));
        assert_eq!(generate_blobs(&spec).unwrap(), ds);
        assert!(generate_blobs(&BlobSpec { n: 1, ..spec }).is_err());
    }

    #[test]
    fn blob_centers_are_separated() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let c = class_centers(&mut rng, 3, 6, 4.0);
        for a in 0..3 {
            for b in a + 1..3 {
                let dist: f64 = c[a].iter().zip(&c[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!((dist.sqrt() - 4.0).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn partition_preserves_features(d in 1usize..20, m_raw in 1usize..20, seed in 0u64..1000) {
            let m = 1 + m_raw % d;
            let single = generate_blobs(&BlobSpec { n: 8, d, clients: 1, classes: 2, separation: 2.0, seed }).unwrap();
            let parts = vertical_partition(&single, m).unwrap();
            prop_assert_eq!(parts.num_features(), d);
            for id in single.clients[0].ids() {
                prop_assert_eq!(parts.concat_row(id).unwrap(), single.clients[0].get(id).unwrap().to_vec());
            }
        }

        #[test]
        fn planted_intersection_is_exact(m in 2usize..=16, which in 0usize..4, seed in 0u64..1000) {
            let overlap = [0.1, 0.5, 0.7, 1.0][which];
            let sets = synthesize_id_sets(50, m, overlap, seed).unwrap();
            let mut common: BTreeSet<SampleId> = sets[0].iter().copied().collect();
            for s in &sets[1..] {
                let other: BTreeSet<SampleId> = s.iter().copied().collect();
                common = common.intersection(&other).copied().collect();
            }
            prop_assert_eq!(common.len(), planted_count(overlap, 50));
        }
    }
}
