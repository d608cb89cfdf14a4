//! Cluster-coreset construction over aligned samples.
//!
//! Each client clusters its own slice and ranks samples inside their cluster by
//! distance to the centroid. Per-sample `(cluster, weight, distance)` messages are
//! sealed for the label owner and travel through the aggregation server, which
//! only concatenates them by position. The label owner groups samples by cluster
//! tuple and label, keeps the most central sample of each cell, and broadcasts
//! the sealed selection back to every client.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::codec::{put_f64, put_u32, put_u64, CodecError, Reader};
use crate::crypto::envelope::{SealedEnvelope, KEY_ID_BYTES, SEAL_OVERHEAD};
use crate::crypto::{envelope_open, envelope_seal, CryptoError, SealingKeyPair};
use crate::data::{ClientTable, DataError, Label, LabelTable, SampleId, Task, VerticalDataset};
use crate::transport::{CommStats, Federation, MessageKind, PartyId, TransportError};

/// Plaintext size of one per-sample cluster message.
pub const CLUSTER_MESSAGE_BYTES: usize = 32;
/// Encoded size of one sealed cluster message on the wire.
pub const SEALED_MESSAGE_BYTES: usize = KEY_ID_BYTES + 4 + SEAL_OVERHEAD + CLUSTER_MESSAGE_BYTES;

#[derive(Debug, Error)]
pub enum CoresetError {
    #[error("{clusters} clusters requested for {samples} samples")]
    TooManyClusters { clusters: usize, samples: usize },
    #[error("cluster count must be at least 1")]
    NoClusters,
    #[error("empty aligned set")]
    EmptyAlignment,
    #[error("no message for sample {id} from client {client}")]
    MissingMessage { id: SampleId, client: usize },
    #[error("sample {0} has no label")]
    MissingLabel(SampleId),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("malformed message: {0}")]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(clusters: usize, seed: u64) -> Self {
        KMeansConfig {
            clusters,
            max_iter: 100,
            tol: 1e-4,
            seed,
        }
    }
}

/// One client's clustering of the aligned samples, stored by position in `ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalClustering {
    pub client: usize,
    pub ids: Vec<SampleId>,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub distances: Vec<f64>,
    /// Inertia after every assignment step, ending with the final one.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl LocalClustering {
    pub fn clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn inertia(&self) -> f64 {
        self.distances.iter().map(|d| d * d).sum()
    }

    fn position(&self, id: SampleId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn assignment(&self, id: SampleId) -> Option<usize> {
        self.position(id).map(|i| self.assignments[i])
    }

    pub fn distance(&self, id: SampleId) -> Option<f64> {
        self.position(id).map(|i| self.distances[i])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng>(points: &[&[f64]], c: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        let next = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &next));
        }
        centroids.push(next);
    }
    centroids
}

/// k-means++ seeding then Lloyd iterations over `table` restricted to `ids`.
/// Empty clusters keep their previous centroid.
pub fn kmeans(table: &ClientTable, ids: &[SampleId], cfg: &KMeansConfig) -> Result<LocalClustering, CoresetError> {
    if cfg.clusters == 0 {
        return Err(CoresetError::NoClusters);
    }
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if cfg.clusters > ids.len() {
        return Err(CoresetError::TooManyClusters {
            clusters: cfg.clusters,
            samples: ids.len(),
        });
    }
    let points: Vec<&[f64]> = ids.iter().map(|id| table.row(*id)).collect::<Result<_, _>>()?;
    let dim = table.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut centroids = kmeans_pp(&points, cfg.clusters, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;

    loop {
        let mut inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(&points) {
            let (k, d) = nearest(p, &centroids);
            *a = k;
            inertia += d;
        }
        inertia_trace.push(inertia);
        if iterations == cfg.max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; cfg.clusters];
        let mut counts = vec![0usize; cfg.clusters];
        for (a, p) in assignments.iter().zip(&points) {
            counts[*a] += 1;
            for (s, x) in sums[*a].iter_mut().zip(*p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for ((c, s), n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if *n == 0 {
                continue;
            }
            let next: Vec<f64> = s.iter().map(|v| v / *n as f64).collect();
            shift = shift.max(sq_dist(c, &next).sqrt());
            *c = next;
        }
        if shift < cfg.tol {
            let mut inertia = 0.0;
            for (a, p) in assignments.iter_mut().zip(&points) {
                let (k, d) = nearest(p, &centroids);
                *a = k;
                inertia += d;
            }
            inertia_trace.push(inertia);
            break;
        }
    }

    let distances = assignments
        .iter()
        .zip(&points)
        .map(|(a, p)| sq_dist(p, &centroids[*a]).sqrt())
        .collect();
    Ok(LocalClustering {
        client: table.client(),
        ids,
        assignments,
        centroids,
        distances,
        inertia_trace,
        iterations,
    })
}

/// Local weights by position in `ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalWeighting {
    pub client: usize,
    pub ids: Vec<SampleId>,
    pub weights: Vec<f64>,
}

impl LocalWeighting {
    pub fn get(&self, id: SampleId) -> Option<f64> {
        self.ids.binary_search(&id).ok().map(|i| self.weights[i])
    }
}

/// Inside each cluster, samples sorted by distance descending (ties: ascending
/// id) get weight `pos / |cluster|` with 1-based `pos`; the nearest gets 1.
pub fn compute_local_weights(lc: &LocalClustering) -> LocalWeighting {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); lc.clusters()];
    for (i, a) in lc.assignments.iter().enumerate() {
        members[*a].push(i);
    }
    let mut weights = vec![0.0; lc.ids.len()];
    for mut m in members {
        m.sort_by(|a, b| {
            lc.distances[*b]
                .total_cmp(&lc.distances[*a])
                .then(lc.ids[*a].cmp(&lc.ids[*b]))
        });
        let size = m.len() as f64;
        for (pos, i) in m.into_iter().enumerate() {
            weights[i] = (pos + 1) as f64 / size;
        }
    }
    LocalWeighting {
        client: lc.client,
        ids: lc.ids.clone(),
        weights,
    }
}

/// One client's fixed-width per-sample message: `[id][client][cluster][w][ed]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterMessage {
    pub id: SampleId,
    pub client: u32,
    pub cluster: u32,
    pub weight: f64,
    pub distance: f64,
}

impl ClusterMessage {
    pub fn encode(&self) -> [u8; CLUSTER_MESSAGE_BYTES] {
        let mut buf = Vec::with_capacity(CLUSTER_MESSAGE_BYTES);
        put_u64(&mut buf, self.id.0);
        put_u32(&mut buf, self.client);
        put_u32(&mut buf, self.cluster);
        put_f64(&mut buf, self.weight);
        put_f64(&mut buf, self.distance);
        buf.try_into().expect("fixed layout")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let msg = ClusterMessage {
            id: SampleId(r.u64()?),
            client: r.u32()?,
            cluster: r.u32()?,
            weight: r.f64()?,
            distance: r.f64()?,
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Everything the label owner knows about one aligned sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CtRecord {
    pub id: SampleId,
    pub ct: Vec<u32>,
    pub distances: Vec<f64>,
    pub weights: Vec<f64>,
}

impl CtRecord {
    pub fn distance_sum(&self) -> f64 {
        self.distances.iter().sum()
    }

    pub fn global_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Assembles records from per-client messages (each list in client order).
/// Fails naming the first sample and client without a message.
pub fn build_cluster_tuples(
    aligned: &[SampleId],
    per_client: &[Vec<ClusterMessage>],
) -> Result<Vec<CtRecord>, CoresetError> {
    let m = per_client.len();
    let mut records: BTreeMap<SampleId, CtRecord> = aligned
        .iter()
        .map(|id| {
            (
                *id,
                CtRecord {
                    id: *id,
                    ct: vec![u32::MAX; m],
                    distances: vec![f64::NAN; m],
                    weights: vec![f64::NAN; m],
                },
            )
        })
        .collect();
    for msgs in per_client {
        for msg in msgs {
            let slot = (msg.client as usize)
                .checked_sub(1)
                .filter(|c| *c < m)
                .ok_or_else(|| CoresetError::Protocol(format!("client index {} out of range", msg.client)))?;
            let rec = records
                .get_mut(&msg.id)
                .ok_or_else(|| CoresetError::Protocol(format!("message for unaligned sample {}", msg.id.0)))?;
            rec.ct[slot] = msg.cluster;
            rec.distances[slot] = msg.distance;
            rec.weights[slot] = msg.weight;
        }
    }
    for rec in records.values() {
        if let Some(slot) = rec.ct.iter().position(|c| *c == u32::MAX) {
            return Err(CoresetError::MissingMessage {
                id: rec.id,
                client: slot + 1,
            });
        }
    }
    Ok(records.into_values().collect())
}

/// Quantile bin edges for `bins` bins over `values`.
pub fn quantile_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() || bins <= 1 {
        return Vec::new();
    }
    (1..bins).map(|k| sorted[k * sorted.len() / bins]).collect()
}

pub fn bin_of(value: f64, edges: &[f64]) -> usize {
    edges.partition_point(|e| *e <= value)
}

/// Per-sample label key for the cell split: the class, or a quantile bin.
pub fn label_keys(labels: &LabelTable, ids: &[SampleId], task: Task, bins: usize) -> Result<Vec<usize>, CoresetError> {
    let raw: Vec<Label> = ids
        .iter()
        .map(|id| labels.get(*id).ok_or(CoresetError::MissingLabel(*id)))
        .collect::<Result<_, _>>()?;
    Ok(match task {
        Task::Classification { .. } => raw
            .iter()
            .map(|l| {
                l.class()
                    .ok_or_else(|| CoresetError::Protocol(String::from("regression label in a classification task")))
            })
            .collect::<Result<_, _>>()?,
        Task::Regression => {
            let values: Vec<f64> = raw.iter().map(|l| l.as_f64()).collect();
            let edges = quantile_edges(&values, bins);
            values.iter().map(|v| bin_of(*v, &edges)).collect()
        }
    })
}

/// One representative per (cluster tuple, label) cell: smallest distance sum,
/// ties to the smaller id. Returned ids ascend.
pub fn select_representatives(records: &[CtRecord], keys: &[usize]) -> Result<Vec<SampleId>, CoresetError> {
    if records.is_empty() {
        return Err(CoresetError::EmptyAlignment);
    }
    let mut best: BTreeMap<(&[u32], usize), (f64, SampleId)> = BTreeMap::new();
    for (rec, key) in records.iter().zip(keys) {
        let cand = (rec.distance_sum(), rec.id);
        best.entry((rec.ct.as_slice(), *key))
            .and_modify(|cur| {
                if cand.0 < cur.0 || (cand.0 == cur.0 && cand.1 < cur.1) {
                    *cur = cand;
                }
            })
            .or_insert(cand);
    }
    let mut ids: Vec<SampleId> = best.into_values().map(|(_, id)| id).collect();
    ids.sort_unstable();
    Ok(ids)
}

pub fn distinct_cts(records: &[CtRecord]) -> usize {
    let set: std::collections::BTreeSet<&[u32]> = records.iter().map(|r| r.ct.as_slice()).collect();
    set.len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetSelection {
    pub ids: Vec<SampleId>,
    pub weights: Vec<f64>,
}

impl CoresetSelection {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn weight(&self, id: SampleId) -> Option<f64> {
        self.ids.binary_search(&id).ok().map(|i| self.weights[i])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(4 + 16 * self.ids.len());
        put_u32(&mut buf, self.ids.len() as u32);
        for (id, w) in self.ids.iter().zip(&self.weights) {
            put_u64(&mut buf, id.0);
            put_f64(&mut buf, *w);
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let n = r.u32()? as usize;
        let mut ids = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(SampleId(r.u64()?));
            weights.push(r.f64()?);
        }
        r.finish()?;
        Ok(CoresetSelection { ids, weights })
    }

    /// `sample_id,global_weight` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CoresetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample_id", "global_weight"])
            .map_err(DataError::from)?;
        for (id, weight) in self.ids.iter().zip(&self.weights) {
            w.write_record([id.0.to_string(), format!("{weight}")])
                .map_err(DataError::from)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`CoresetSelection::write_csv`].
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, CoresetError> {
        let mut r = csv::Reader::from_reader(input);
        let mut ids = Vec::new();
        let mut weights = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(DataError::from)?;
            let bad = |what: &str| CoresetError::Protocol(format!("coreset row {}: bad {what}", line + 2));
            if rec.len() != 2 {
                return Err(bad("column count"));
            }
            ids.push(SampleId(rec[0].trim().parse().map_err(|_| bad("sample_id"))?));
            let w: f64 = rec[1].trim().parse().map_err(|_| bad("global_weight"))?;
            if !(w.is_finite() && w > 0.0) {
                return Err(bad("global_weight"));
            }
            weights.push(w);
        }
        Ok(CoresetSelection { ids, weights })
    }
}

/// Global weight of each selected id: the sum of its local weights.
pub fn assemble_coreset(selected: &[SampleId], records: &[CtRecord]) -> Result<CoresetSelection, CoresetError> {
    let by_id: BTreeMap<SampleId, &CtRecord> = records.iter().map(|r| (r.id, r)).collect();
    let weights = selected
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .map(|r| r.global_weight())
                .ok_or_else(|| CoresetError::Protocol(format!("selected sample {} has no record", id.0)))
        })
        .collect::<Result<_, _>>()?;
    Ok(CoresetSelection {
        ids: selected.to_vec(),
        weights,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetReport {
    #[serde(rename = "N_align")]
    pub n_align: usize,
    pub c: usize,
    pub distinct_ct: usize,
    pub coreset_size: usize,
    /// Fraction of aligned samples removed: `1 - coreset_size / N_align`.
    pub compression_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetConfig {
    pub clusters: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub regression_bins: usize,
    pub seed: u64,
}

impl CoresetConfig {
    pub fn new(clusters: usize, seed: u64) -> Self {
        CoresetConfig {
            clusters,
            max_iter: 100,
            tol: 1e-4,
            regression_bins: 10,
            seed,
        }
    }

    fn kmeans_for(&self, client: usize) -> KMeansConfig {
        KMeansConfig {
            clusters: self.clusters,
            max_iter: self.max_iter,
            tol: self.tol,
            seed: self
                .seed
                .wrapping_add((client as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoresetOutcome {
    pub selection: CoresetSelection,
    pub clusterings: Vec<LocalClustering>,
    pub weightings: Vec<LocalWeighting>,
    pub records: Vec<CtRecord>,
    pub report: CoresetReport,
    /// Each client's feature slice restricted to the coreset, in client order.
    pub client_views: Vec<ClientTable>,
    pub stats: CommStats,
}

fn seal_messages(msgs: &[ClusterMessage], keys: &SealingKeyPair, seed: u64) -> Result<Vec<u8>, CoresetError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut payload = Vec::with_capacity(4 + msgs.len() * SEALED_MESSAGE_BYTES);
    put_u32(&mut payload, msgs.len() as u32);
    for m in msgs {
        let env = envelope_seal(&m.encode(), keys.public(), &mut rng)?;
        payload.extend_from_slice(&env.to_bytes());
    }
    Ok(payload)
}

fn split_sealed(bytes: &[u8]) -> Result<Vec<&[u8]>, CodecError> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let block = r.bytes(
        n.checked_mul(SEALED_MESSAGE_BYTES)
            .ok_or(CodecError::Invalid("count"))?,
    )?;
    r.finish()?;
    Ok(block.chunks_exact(SEALED_MESSAGE_BYTES).collect())
}

fn open_all(envs: &[&[u8]], keys: &SealingKeyPair) -> Result<Vec<ClusterMessage>, CoresetError> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(16);
    let chunk = envs.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<ClusterMessage>, CoresetError>> = std::thread::scope(|s| {
        let handles: Vec<_> = envs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|b| {
                            let env = SealedEnvelope::from_bytes(b)?;
                            Ok(ClusterMessage::decode(&envelope_open(&env, keys)?)?)
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("opener panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(envs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Runs the whole construction over the bus. `data` holds every client's slice
/// and the label owner's labels; `keys` is the pair the key server distributed.
pub fn build_coreset(
    fed: &Federation,
    data: &VerticalDataset,
    aligned: &[SampleId],
    keys: &SealingKeyPair,
    cfg: &CoresetConfig,
) -> Result<CoresetOutcome, CoresetError> {
    let m = data.num_clients();
    if fed.clients.len() != m {
        return Err(CoresetError::Protocol(format!(
            "{} endpoints for {m} clients",
            fed.clients.len()
        )));
    }
    let mut aligned = aligned.to_vec();
    aligned.sort_unstable();
    aligned.dedup();
    if aligned.is_empty() {
        return Err(CoresetError::EmptyAlignment);
    }
    let start = fed.bus.snapshot_stats();
    let session = fed.bus.open_session();

    // clients: cluster, weight, seal, send (concurrently)
    let local: Vec<Result<(LocalClustering, LocalWeighting), CoresetError>> = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .clients
            .iter()
            .zip(&fed.clients)
            .enumerate()
            .map(|(i, (table, ep))| {
                let aligned = &aligned;
                s.spawn(move || {
                    let lc = kmeans(table, aligned, &cfg.kmeans_for(i + 1))?;
                    let lw = compute_local_weights(&lc);
                    let msgs: Vec<ClusterMessage> = (0..lc.ids.len())
                        .map(|j| ClusterMessage {
                            id: lc.ids[j],
                            client: (i + 1) as u32,
                            cluster: lc.assignments[j] as u32,
                            weight: lw.weights[j],
                            distance: lc.distances[j],
                        })
                        .collect();
                    let payload = seal_messages(&msgs, keys, cfg.seed ^ ((i as u64 + 1) << 40))?;
                    ep.send(
                        PartyId::AggregationServer,
                        session,
                        MessageKind::ClusterMessages,
                        payload,
                    )?;
                    Ok((lc, lw))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client panicked"))
            .collect()
    });
    let (clusterings, weightings): (Vec<_>, Vec<_>) =
        local.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().unzip();

    // aggregation server: concatenate the i-th message of every client
    let mut inbound: BTreeMap<PartyId, Vec<u8>> = BTreeMap::new();
    for _ in 0..m {
        let env = fed.aggregation.expect(session, MessageKind::ClusterMessages)?;
        inbound.insert(env.from, env.payload);
    }
    let columns: Vec<Vec<&[u8]>> = fed
        .clients
        .iter()
        .map(|ep| {
            let bytes = inbound
                .get(&ep.party())
                .ok_or_else(|| CoresetError::Protocol(format!("no messages from {}", ep.party())))?;
            Ok(split_sealed(bytes)?)
        })
        .collect::<Result<_, CoresetError>>()?;
    let rows = columns.iter().map(Vec::len).max().unwrap_or(0);
    let mut bundle = Vec::with_capacity(8 + rows * m * (1 + SEALED_MESSAGE_BYTES));
    put_u32(&mut bundle, rows as u32);
    put_u32(&mut bundle, m as u32);
    for i in 0..rows {
        for col in &columns {
            // presence flag, so a short column surfaces as a missing message
            match col.get(i) {
                Some(b) => {
                    bundle.push(1);
                    bundle.extend_from_slice(b);
                }
                None => bundle.push(0),
            }
        }
    }
    fed.aggregation
        .send(PartyId::LabelOwner, session, MessageKind::ClusterBundles, bundle)?;

    // label owner: open, build tuples, select
    let env = fed.label_owner.expect(session, MessageKind::ClusterBundles)?;
    let mut r = Reader::new(&env.payload);
    let rows = r.u32()? as usize;
    let width = r.u32()? as usize;
    let mut envs: Vec<&[u8]> = Vec::with_capacity(rows * width);
    let mut columns_of = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        for col in 0..width {
            if r.bytes(1)?[0] == 1 {
                envs.push(r.bytes(SEALED_MESSAGE_BYTES)?);
                columns_of.push(col);
            }
        }
    }
    r.finish()?;
    let opened = open_all(&envs, keys)?;
    let mut per_client: Vec<Vec<ClusterMessage>> = vec![Vec::with_capacity(rows); width];
    for (col, msg) in columns_of.into_iter().zip(opened) {
        per_client[col].push(msg);
    }
    let records = build_cluster_tuples(&aligned, &per_client)?;
    let keys_by_label = label_keys(&data.labels, &aligned, data.task, cfg.regression_bins)?;
    let chosen = select_representatives(&records, &keys_by_label)?;
    let selection = assemble_coreset(&chosen, &records)?;

    // sealed broadcast of the selection back to every client
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5e1e_c710);
    let sealed = envelope_seal(&selection.encode(), keys.public(), &mut rng)?;
    fed.label_owner.send(
        PartyId::AggregationServer,
        session,
        MessageKind::SealedSelection,
        sealed.to_bytes(),
    )?;
    let relay = fed.aggregation.expect(session, MessageKind::SealedSelection)?;
    for ep in &fed.clients {
        fed.aggregation
            .send(ep.party(), session, MessageKind::SealedSelection, relay.payload.clone())?;
    }
    let mut client_views = Vec::with_capacity(m);
    for (ep, table) in fed.clients.iter().zip(&data.clients) {
        let env = ep.expect(session, MessageKind::SealedSelection)?;
        let got = CoresetSelection::decode(&envelope_open(&SealedEnvelope::from_bytes(&env.payload)?, keys)?)?;
        if got != selection {
            return Err(CoresetError::Protocol(format!(
                "{} opened a different selection",
                ep.party()
            )));
        }
        client_views.push(table.restrict(&got.ids)?);
    }
    fed.bus.close_session(session);

    let report = CoresetReport {
        n_align: aligned.len(),
        c: cfg.clusters,
        distinct_ct: distinct_cts(&records),
        coreset_size: selection.len(),
        compression_ratio: 1.0 - selection.len() as f64 / aligned.len() as f64,
    };
    Ok(CoresetOutcome {
        selection,
        clusterings,
        weightings,
        records,
        report,
        client_views,
        stats: fed.bus.snapshot_stats().since(&start),
    })
}

/// Coreset of a dataset without any transport: the same computation the
/// label owner performs, for local tools and the browser demo.
pub fn coreset_in_memory(
    data: &VerticalDataset,
    aligned: &[SampleId],
    cfg: &CoresetConfig,
) -> Result<(CoresetSelection, Vec<CtRecord>, CoresetReport), CoresetError> {
    let mut aligned = aligned.to_vec();
    aligned.sort_unstable();
    aligned.dedup();
    if aligned.is_empty() {
        return Err(CoresetError::EmptyAlignment);
    }
    let mut per_client = Vec::with_capacity(data.num_clients());
    for (i, table) in data.clients.iter().enumerate() {
        let lc = kmeans(table, &aligned, &cfg.kmeans_for(i + 1))?;
        let lw = compute_local_weights(&lc);
        per_client.push(
            (0..lc.ids.len())
                .map(|j| ClusterMessage {
                    id: lc.ids[j],
                    client: (i + 1) as u32,
                    cluster: lc.assignments[j] as u32,
                    weight: lw.weights[j],
                    distance: lc.distances[j],
                })
                .collect::<Vec<_>>(),
        );
    }
    let records = build_cluster_tuples(&aligned, &per_client)?;
    let keys = label_keys(&data.labels, &aligned, data.task, cfg.regression_bins)?;
    let selection = assemble_coreset(&select_representatives(&records, &keys)?, &records)?;
    let report = CoresetReport {
        n_align: aligned.len(),
        c: cfg.clusters,
        distinct_ct: distinct_cts(&records),
        coreset_size: selection.len(),
        compression_ratio: 1.0 - selection.len() as f64 / aligned.len() as f64,
    };
    Ok((selection, records, report))
}

/// Uniform random pick of `n` ids, used by baselines that subsample.
pub fn random_subset<R: RngCore>(ids: &[SampleId], n: usize, rng: &mut R) -> Vec<SampleId> {
    use rand::seq::SliceRandom;
    let mut v: Vec<SampleId> = ids.choose_multiple(rng, n.min(ids.len())).copied().collect();
    v.sort_unstable();
    v
}
