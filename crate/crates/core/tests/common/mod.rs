//! Independent single-machine oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use treecss::data::{ClientTable, Label, LabelTable, SampleId, Task, VerticalDataset};
use treecss::train::model::LossKind;
use treecss::train::{KnnReference, ModelKind, ModelSpec, ParamDump};

pub fn random_dataset(n: usize, dims: &[usize], task: Task, seed: u64) -> VerticalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clients: Vec<ClientTable> = dims
        .iter()
        .enumerate()
        .map(|(m, &d)| ClientTable::new(m + 1, d))
        .collect();
    let mut labels = LabelTable::new();
    for i in 0..n as u64 {
        for (t, &d) in clients.iter_mut().zip(dims) {
            t.insert(SampleId(i), (0..d).map(|_| rng.sample(StandardNormal)).collect())
                .unwrap();
        }
        let label = match task {
            Task::Classification { classes } => Label::Class(rng.gen_range(0..classes)),
            Task::Regression => Label::Value(rng.sample(StandardNormal)),
        };
        labels.insert(SampleId(i), label);
    }
    VerticalDataset { clients, labels, task }
}

pub fn ids(n: usize) -> Vec<SampleId> {
    (0..n as u64).map(SampleId).collect()
}

pub fn labels_of(data: &VerticalDataset, ids: &[SampleId]) -> Vec<Label> {
    ids.iter().map(|id| data.labels.get(*id).unwrap()).collect()
}

/// Single-machine model on concatenated features. Linear models use one
/// `D × O` matrix; the MLP uses a block-diagonal `D × M·h` first layer whose
/// off-block entries are pinned to zero.
pub struct Central {
    pub kind: ModelKind,
    pub loss: LossKind,
    pub d: usize,
    pub k: usize,
    pub o: usize,
    pub hid: usize,
    pub first: Vec<f64>,
    pub mask: Vec<bool>,
    pub first_bias: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Central {
    pub fn from_dump(spec: &ModelSpec, dump: &ParamDump) -> Self {
        let d: usize = spec.client_dims.iter().sum();
        let by_name: BTreeMap<&str, &Vec<f64>> = dump.entries.iter().map(|e| (e.name.as_str(), &e.values)).collect();
        let mlp = spec.kind == ModelKind::Mlp;
        let k = if mlp {
            spec.clients() * spec.bottom_width
        } else {
            spec.outputs
        };
        let mut first = vec![0.0; d * k];
        let mut mask = vec![false; d * k];
        let mut first_bias = vec![0.0; if mlp { k } else { 0 }];
        let mut row0 = 0;
        for (m, &dm) in spec.client_dims.iter().enumerate() {
            let w = by_name[format!("bottom{}.w", m + 1).as_str()];
            let width = spec.bottom_width;
            let col0 = if mlp { m * width } else { 0 };
            for r in 0..dm {
                for c in 0..width {
                    first[(row0 + r) * k + col0 + c] = w[r * width + c];
                    mask[(row0 + r) * k + col0 + c] = true;
                }
            }
            if mlp {
                first_bias[col0..col0 + width].copy_from_slice(by_name[format!("bottom{}.b", m + 1).as_str()]);
            }
            row0 += dm;
        }
        let get = |n: &str| by_name.get(n).map(|v| v.to_vec()).unwrap_or_default();
        let (w1, b1, w2, b2) = if mlp {
            (get("top.w1"), get("top.b1"), get("top.w2"), get("top.b2"))
        } else {
            (vec![], vec![], vec![], get("top.bias"))
        };
        Central {
            kind: spec.kind,
            loss: spec.loss,
            d,
            k,
            o: spec.outputs,
            hid: spec.top_hidden,
            first,
            mask,
            first_bias,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn params(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.first,
            &mut self.first_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn affine(x: &[f64], w: &[f64], b: &[f64], cols: usize) -> Vec<f64> {
        (0..cols)
            .map(|c| {
                x.iter().enumerate().map(|(r, v)| v * w[r * cols + c]).sum::<f64>() + b.get(c).copied().unwrap_or(0.0)
            })
            .collect()
    }

    /// Loss and gradients in `params()` order.
    pub fn loss_grad(&self, xs: &[Vec<f64>], ys: &[Label], ws: &[f64]) -> (f64, Vec<Vec<f64>>) {
        let mut g = vec![
            vec![0.0; self.first.len()],
            vec![0.0; self.first_bias.len()],
            vec![0.0; self.w1.len()],
            vec![0.0; self.b1.len()],
            vec![0.0; self.w2.len()],
            vec![0.0; self.b2.len()],
        ];
        let mut total = 0.0;
        for ((x, y), w) in xs.iter().zip(ys).zip(ws) {
            let c = Self::affine(x, &self.first, &self.first_bias, self.k);
            let (z, h) = if self.kind == ModelKind::Mlp {
                let h: Vec<f64> = Self::affine(&c, &self.w1, &self.b1, self.hid)
                    .iter()
                    .map(|v| v.tanh())
                    .collect();
                (Self::affine(&h, &self.w2, &self.b2, self.o), h)
            } else {
                (c.iter().zip(&self.b2).map(|(a, b)| a + b).collect(), vec![])
            };
            let (l, dz): (f64, Vec<f64>) = match self.loss {
                LossKind::Bce => {
                    let p = 1.0 / (1.0 + (-z[0]).exp());
                    let t = y.as_f64();
                    (-(t * p.ln() + (1.0 - t) * (1.0 - p).ln()), vec![p - t])
                }
                LossKind::SoftmaxCe => {
                    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
                    let s: f64 = e.iter().sum();
                    let t = y.class().unwrap();
                    (
                        -(e[t] / s).ln(),
                        (0..self.o).map(|j| e[j] / s - if j == t { 1.0 } else { 0.0 }).collect(),
                    )
                }
                LossKind::Squared => {
                    let r = z[0] - y.as_f64();
                    (r * r, vec![2.0 * r])
                }
            };
            total += w * l;
            let dz: Vec<f64> = dz.iter().map(|v| w * v).collect();
            let dc: Vec<f64> = if self.kind == ModelKind::Mlp {
                for j in 0..self.o {
                    g[5][j] += dz[j];
                    for i in 0..self.hid {
                        g[4][i * self.o + j] += h[i] * dz[j];
                    }
                }
                let dpre: Vec<f64> = (0..self.hid)
                    .map(|i| (0..self.o).map(|j| self.w2[i * self.o + j] * dz[j]).sum::<f64>() * (1.0 - h[i] * h[i]))
                    .collect();
                for i in 0..self.hid {
                    g[3][i] += dpre[i];
                    for r in 0..self.k {
                        g[2][r * self.hid + i] += c[r] * dpre[i];
                    }
                }
                let dc: Vec<f64> = (0..self.k)
                    .map(|r| (0..self.hid).map(|i| self.w1[r * self.hid + i] * dpre[i]).sum())
                    .collect();
                for r in 0..self.k {
                    g[1][r] += dc[r];
                }
                dc
            } else {
                for j in 0..self.o {
                    g[5][j] += dz[j];
                }
                dz
            };
            for r in 0..self.d {
                for c in 0..self.k {
                    if self.mask[r * self.k + c] {
                        g[0][r * self.k + c] += x[r] * dc[c];
                    }
                }
            }
        }
        (total, g)
    }

    pub fn adam_step(&mut self, grads: &[Vec<f64>], state: &mut Vec<(Vec<f64>, Vec<f64>)>, t: i32, lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        if state.is_empty() {
            *state = grads.iter().map(|g| (vec![0.0; g.len()], vec![0.0; g.len()])).collect();
        }
        for ((p, g), (m, v)) in self.params().into_iter().zip(grads).zip(state.iter_mut()) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / (1.0 - b1.powi(t))) / ((v[i] / (1.0 - b2.powi(t))).sqrt() + eps);
            }
        }
    }
}

pub fn central_knn(data: &VerticalDataset, refs: &KnnReference, q: SampleId, k: usize) -> Label {
    let x = data.concat_row(q).unwrap();
    let mut scored: Vec<(f64, SampleId, f64)> = refs
        .ids
        .iter()
        .zip(&refs.weights)
        .map(|(id, w)| {
            let r = data.concat_row(*id).unwrap();
            (x.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum(), *id, *w)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let classes = match data.task {
        Task::Classification { classes } => classes,
        Task::Regression => unreachable!("classification only"),
    };
    let mut mass = vec![0.0f64; classes];
    for (_, id, w) in &scored[..k] {
        mass[data.labels.get(*id).unwrap().class().unwrap()] += w;
    }
    // first maximum wins, so vote ties go to the smaller label
    let mut best = 0;
    for c in 1..classes {
        if mass[c] > mass[best] {
            best = c;
        }
    }
    Label::Class(best)
}
