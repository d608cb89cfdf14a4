//! One training step as four message hops: client activations to the server,
//! top outputs to the label owner, output gradients back to the server, and
//! bottom gradients back to each client. Every party applies its own Adam step.

use std::collections::BTreeMap;

use super::adam::{Adam, AdamConfig};
use super::model::{weighted_loss, Bottom, LossKind, Mat, ModelSpec, SplitModel, Top};
use super::TrainError;
use crate::crypto::codec::{put_f64, put_u32, Reader};
use crate::data::{ClientTable, Label, LabelTable, SampleId, VerticalDataset};
use crate::transport::{Endpoint, Federation, MessageKind, PartyId, SessionId};

/// Wire size of a `rows × cols` matrix message.
pub fn mat_bytes(rows: usize, cols: usize) -> u64 {
    8 + 8 * (rows * cols) as u64
}

pub fn encode_mat(m: &Mat) -> Vec<u8> {
    let mut buf = Vec::with_capacity(mat_bytes(m.rows, m.cols) as usize);
    put_u32(&mut buf, m.rows as u32);
    put_u32(&mut buf, m.cols as u32);
    for v in &m.data {
        put_f64(&mut buf, *v);
    }
    buf
}

pub fn decode_mat(bytes: &[u8]) -> Result<Mat, TrainError> {
    let mut r = Reader::new(bytes);
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or(TrainError::Protocol(String::from("matrix size overflow")))?;
    if r.remaining() != n * 8 {
        return Err(TrainError::Protocol(format!(
            "matrix {rows}x{cols} with {} payload bytes",
            r.remaining()
        )));
    }
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(Mat { rows, cols, data })
}

/// Bytes one step moves for a batch of `batch` samples.
pub fn step_bytes(spec: &ModelSpec, batch: usize) -> u64 {
    let m = spec.clients() as u64;
    2 * m * mat_bytes(batch, spec.bottom_width) + 2 * mat_bytes(batch, spec.outputs)
}

/// Feature rows of `ids` from one client's table.
pub fn gather(table: &ClientTable, ids: &[SampleId]) -> Result<Mat, TrainError> {
    let rows = ids
        .iter()
        .map(|id| {
            table.get(*id).ok_or(TrainError::MissingSample {
                id: *id,
                client: table.client(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Mat::from_rows(&rows, table.dim()))
}

/// Per-client feature blocks for `ids`.
pub fn gather_all(data: &VerticalDataset, ids: &[SampleId]) -> Result<Vec<Mat>, TrainError> {
    data.clients.iter().map(|t| gather(t, ids)).collect()
}

pub fn gather_labels(labels: &LabelTable, ids: &[SampleId]) -> Result<Vec<Label>, TrainError> {
    ids.iter()
        .map(|id| labels.get(*id).ok_or(TrainError::MissingLabel(*id)))
        .collect()
}

struct ClientWorker<'a> {
    ep: &'a Endpoint,
    table: &'a ClientTable,
    bottom: Bottom,
    opt: Adam,
    batch_x: Option<Mat>,
}

struct ServerWorker<'a> {
    ep: &'a Endpoint,
    top: Top,
    opt: Adam,
    widths: Vec<usize>,
}

struct OwnerWorker<'a> {
    ep: &'a Endpoint,
    labels: &'a LabelTable,
    weights: &'a BTreeMap<SampleId, f64>,
    loss: LossKind,
}

/// A training run on the bus. Each worker only touches its own state.
pub struct SplitSession<'a> {
    spec: ModelSpec,
    session: SessionId,
    clients: Vec<ClientWorker<'a>>,
    server: ServerWorker<'a>,
    owner: OwnerWorker<'a>,
}

impl<'a> SplitSession<'a> {
    pub fn new(
        fed: &'a Federation,
        data: &'a VerticalDataset,
        weights: &'a BTreeMap<SampleId, f64>,
        model: SplitModel,
        lr: f64,
        adam: AdamConfig,
    ) -> Result<Self, TrainError> {
        if fed.clients.len() != data.num_clients() || model.bottoms.len() != data.num_clients() {
            return Err(TrainError::Protocol(format!(
                "{} client endpoints, {} client tables, {} bottoms",
                fed.clients.len(),
                data.num_clients(),
                model.bottoms.len()
            )));
        }
        let SplitModel { spec, bottoms, top } = model;
        let clients = bottoms
            .into_iter()
            .zip(&fed.clients)
            .zip(&data.clients)
            .map(|((bottom, ep), table)| ClientWorker {
                ep,
                table,
                opt: Adam::new(bottom.num_params(), lr, adam),
                bottom,
                batch_x: None,
            })
            .collect();
        let widths = vec![spec.bottom_width; spec.clients()];
        let server = ServerWorker {
            ep: &fed.aggregation,
            opt: Adam::new(top.flat().len(), lr, adam),
            top,
            widths,
        };
        let owner = OwnerWorker {
            ep: &fed.label_owner,
            labels: &data.labels,
            weights,
            loss: spec.loss,
        };
        Ok(SplitSession {
            session: fed.bus.open_session(),
            spec,
            clients,
            server,
            owner,
        })
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    /// Forward, weighted loss, backward and Adam updates for `batch`. Returns
    /// the batch loss `Σ w_i L_i`.
    pub fn step(&mut self, batch: &[SampleId]) -> Result<f64, TrainError> {
        let session = self.session;
        let to_server = PartyId::AggregationServer;

        for c in &mut self.clients {
            let x = gather(c.table, batch)?;
            let a = c.bottom.forward(&x);
            c.ep.send(to_server, session, MessageKind::Activations, encode_mat(&a))?;
            c.batch_x = Some(x);
        }

        let mut acts = Vec::with_capacity(self.clients.len());
        for (m, c) in self.clients.iter().enumerate() {
            let env = self.server.ep.expect(session, MessageKind::Activations)?;
            if env.from != c.ep.party() {
                return Err(TrainError::Protocol(format!(
                    "activation {m} came from {} instead of {}",
                    env.from,
                    c.ep.party()
                )));
            }
            let a = decode_mat(&env.payload)?;
            if a.rows != batch.len() || a.cols != self.server.widths[m] {
                return Err(TrainError::Protocol(format!(
                    "activation shape {}x{} from {}",
                    a.rows, a.cols, env.from
                )));
            }
            acts.push(a);
        }
        let (z, cache) = self.server.top.forward(&acts);
        self.server
            .ep
            .send(PartyId::LabelOwner, session, MessageKind::TopOutputs, encode_mat(&z))?;

        let env = self.owner.ep.expect(session, MessageKind::TopOutputs)?;
        let z = decode_mat(&env.payload)?;
        let labels = gather_labels(self.owner.labels, batch)?;
        let weights = batch
            .iter()
            .map(|id| {
                self.owner
                    .weights
                    .get(id)
                    .copied()
                    .ok_or(TrainError::MissingWeight(*id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (loss, dz) = weighted_loss(self.owner.loss, &z, &labels, &weights);
        if !loss.is_finite() {
            let zmax = z.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            return Err(TrainError::NonFinite(format!(
                "batch loss {loss} at optimizer step {} (max |output| = {zmax})",
                self.server.opt.steps() + 1
            )));
        }
        self.owner
            .ep
            .send(to_server, session, MessageKind::OutputGradients, encode_mat(&dz))?;

        let env = self.server.ep.expect(session, MessageKind::OutputGradients)?;
        let dz = decode_mat(&env.payload)?;
        let grads = self.server.top.backward(&cache, &dz, &self.server.widths);
        let mut flat = self.server.top.flat();
        self.server.opt.step(&mut flat, &grads.flat);
        self.server.top.set_flat(&flat);
        for (c, d) in self.clients.iter().zip(&grads.d_acts) {
            self.server
                .ep
                .send(c.ep.party(), session, MessageKind::BottomGradients, encode_mat(d))?;
        }

        for c in &mut self.clients {
            let env = c.ep.expect(session, MessageKind::BottomGradients)?;
            let d = decode_mat(&env.payload)?;
            let x = c.batch_x.take().expect("activations sent this step");
            let g = c.bottom.backward(&x, &d);
            let mut flat = c.bottom.flat();
            c.opt.step(&mut flat, &g);
            c.bottom.set_flat(&flat);
        }
        Ok(loss)
    }

    /// Reassembles the parties' current parameters.
    pub fn model(&self) -> SplitModel {
        SplitModel {
            spec: self.spec.clone(),
            bottoms: self.clients.iter().map(|c| c.bottom.clone()).collect(),
            top: self.server.top.clone(),
        }
    }

    pub fn finish(self, fed: &Federation) -> SplitModel {
        fed.bus.close_session(self.session);
        self.model()
    }
}
