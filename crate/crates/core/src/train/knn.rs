//! Weighted KNN over vertically split features. Each client sends the label
//! owner one partial squared distance per reference sample; the label owner
//! sums them and votes.

use std::collections::BTreeMap;

use super::TrainError;
use crate::crypto::codec::{put_f64s, Reader};
use crate::data::{Label, SampleId, Task, VerticalDataset};
use crate::transport::{Federation, MessageKind, PartyId};

/// Reference set held by the label owner: ids in a fixed order with weights.
#[derive(Clone, Debug)]
pub struct KnnReference {
    pub ids: Vec<SampleId>,
    pub weights: Vec<f64>,
}

/// Picks the prediction from summed distances. Neighbors are the `k` smallest
/// distances (ties to the smaller id); classification takes the label with the
/// largest weight mass (ties to the smaller label), regression the weighted mean.
pub fn vote(task: Task, dists: &[f64], refs: &KnnReference, labels: &[Label], k: usize) -> Label {
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(refs.ids[a].cmp(&refs.ids[b])));
    let neighbors = &order[..k.min(order.len())];
    match task {
        Task::Classification { .. } => {
            let mut mass: BTreeMap<usize, f64> = BTreeMap::new();
            for &i in neighbors {
                *mass.entry(labels[i].class().unwrap_or(0)).or_default() += refs.weights[i];
            }
            let mut best = (0usize, f64::NEG_INFINITY);
            for (label, m) in mass {
                if m > best.1 {
                    best = (label, m);
                }
            }
            Label::Class(best.0)
        }
        Task::Regression => {
            let (mut num, mut den) = (0.0, 0.0);
            for &i in neighbors {
                num += refs.weights[i] * labels[i].as_f64();
                den += refs.weights[i];
            }
            Label::Value(if den > 0.0 { num / den } else { 0.0 })
        }
    }
}

/// Predicts every query over the bus, one partial-distance message per client
/// per query.
pub fn knn_predict(
    fed: &Federation,
    data: &VerticalDataset,
    refs: &KnnReference,
    queries: &[SampleId],
    k: usize,
) -> Result<Vec<Label>, TrainError> {
    if refs.ids.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if k == 0 || k > refs.ids.len() {
        return Err(TrainError::Config(format!(
            "k = {k} with {} reference samples",
            refs.ids.len()
        )));
    }
    if refs.weights.len() != refs.ids.len() {
        return Err(TrainError::Config(String::from(
            "reference weights and ids differ in length",
        )));
    }
    let labels = super::split::gather_labels(&data.labels, &refs.ids)?;
    // each client's reference block, gathered once
    let ref_blocks = data
        .clients
        .iter()
        .map(|t| super::split::gather(t, &refs.ids))
        .collect::<Result<Vec<_>, _>>()?;

    let session = fed.bus.open_session();
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        for ((ep, table), block) in fed.clients.iter().zip(&data.clients).zip(&ref_blocks) {
            let row = table.get(*q).ok_or(TrainError::MissingSample {
                id: *q,
                client: table.client(),
            })?;
            let partial: Vec<f64> = (0..block.rows)
                .map(|r| block.row(r).iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let mut buf = Vec::with_capacity(4 + 8 * partial.len());
            put_f64s(&mut buf, &partial);
            ep.send(PartyId::LabelOwner, session, MessageKind::KnnPartials, buf)?;
        }
        let mut dists = vec![0.0; refs.ids.len()];
        for _ in &fed.clients {
            let env = fed.label_owner.expect(session, MessageKind::KnnPartials)?;
            let mut r = Reader::new(&env.payload);
            let partial = r.f64s()?;
            r.finish()?;
            if partial.len() != dists.len() {
                return Err(TrainError::Protocol(format!(
                    "{} partial distances from {}, expected {}",
                    partial.len(),
                    env.from,
                    dists.len()
                )));
            }
            for (d, p) in dists.iter_mut().zip(partial) {
                *d += p;
            }
        }
        out.push(vote(data.task, &dists, refs, &labels, k));
    }
    fed.bus.close_session(session);
    Ok(out)
}
