//! Split model math: per-client linear bottoms, a server-side top, and the
//! label owner's weighted loss. Every function here is pure so the bus driver
//! and the in-process gradient path run the same arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, Task};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f64]], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "row width");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shapes");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (x, b) in o.iter_mut().zip(other.row(k)) {
                    *x += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul shapes");
        let mut out = Mat::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, a) in a_row.iter().enumerate() {
                let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (x, b) in o.iter_mut().zip(b_row) {
                    *x += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t shapes");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = self.row(i).iter().zip(other.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogisticRegression,
    LinearRegression,
    Mlp,
    Knn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::LogisticRegression => "lr",
            ModelKind::LinearRegression => "linreg",
            ModelKind::Mlp => "mlp",
            ModelKind::Knn => "knn",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lr" | "logistic" | "logistic_regression" => Ok(ModelKind::LogisticRegression),
            "linreg" | "linear" | "linear_regression" => Ok(ModelKind::LinearRegression),
            "mlp" => Ok(ModelKind::Mlp),
            "knn" => Ok(ModelKind::Knn),
            other => Err(format!("unknown model `{other}` (lr|linreg|mlp|knn)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Sigmoid cross-entropy on a single logit.
    Bce,
    /// Softmax cross-entropy over one logit per class.
    SoftmaxCe,
    /// `(z - y)^2`.
    Squared,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub client_dims: Vec<usize>,
    /// Width of every bottom output.
    pub bottom_width: usize,
    /// Hidden width of the MLP head (unused by linear models).
    pub top_hidden: usize,
    pub outputs: usize,
    pub loss: LossKind,
}

impl ModelSpec {
    /// `hidden` is the MLP bottom width and head width.
    pub fn new(kind: ModelKind, client_dims: Vec<usize>, task: Task, hidden: usize) -> Self {
        let (outputs, loss) = match (kind, task) {
            (ModelKind::LinearRegression, _) | (_, Task::Regression) => (1, LossKind::Squared),
            (ModelKind::LogisticRegression, Task::Classification { classes }) if classes <= 2 => (1, LossKind::Bce),
            (_, Task::Classification { classes }) => (classes.max(2), LossKind::SoftmaxCe),
        };
        let bottom_width = match kind {
            ModelKind::Mlp => hidden,
            _ => outputs,
        };
        ModelSpec {
            kind,
            client_dims,
            bottom_width,
            top_hidden: hidden,
            outputs,
            loss,
        }
    }

    pub fn clients(&self) -> usize {
        self.client_dims.len()
    }
}

/// Server-side head.
#[derive(Clone, Debug, PartialEq)]
pub enum Top {
    /// `z = Σ_m a_m + bias`.
    Sum { bias: Vec<f64> },
    /// `z = tanh([a_1 … a_M] W1 + b1) W2 + b2`.
    Mlp {
        w1: Mat,
        b1: Vec<f64>,
        w2: Mat,
        b2: Vec<f64>,
    },
}

/// What the server keeps from the forward pass for its backward pass.
pub struct TopCache {
    concat: Option<Mat>,
    hidden: Option<Mat>,
}

pub struct TopGrads {
    pub flat: Vec<f64>,
    /// Gradient with respect to each client's bottom output.
    pub d_acts: Vec<Mat>,
}

fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect(),
    }
}

impl Top {
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        match spec.kind {
            ModelKind::Mlp => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7070);
                let input = spec.clients() * spec.bottom_width;
                Top::Mlp {
                    w1: glorot(&mut rng, input, spec.top_hidden),
                    b1: vec![0.0; spec.top_hidden],
                    w2: glorot(&mut rng, spec.top_hidden, spec.outputs),
                    b2: vec![0.0; spec.outputs],
                }
            }
            _ => Top::Sum {
                bias: vec![0.0; spec.outputs],
            },
        }
    }

    pub fn forward(&self, acts: &[Mat]) -> (Mat, TopCache) {
        match self {
            Top::Sum { bias } => {
                let mut z = Mat::zeros(acts[0].rows, bias.len());
                for a in acts {
                    for (x, y) in z.data.iter_mut().zip(&a.data) {
                        *x += y;
                    }
                }
                for r in 0..z.rows {
                    for (x, b) in z.data[r * z.cols..(r + 1) * z.cols].iter_mut().zip(bias) {
                        *x += b;
                    }
                }
                (
                    z,
                    TopCache {
                        concat: None,
                        hidden: None,
                    },
                )
            }
            Top::Mlp { w1, b1, w2, b2 } => {
                let rows = acts[0].rows;
                let width: usize = acts.iter().map(|a| a.cols).sum();
                let mut concat = Mat::zeros(rows, width);
                for r in 0..rows {
                    let mut off = 0;
                    for a in acts {
                        concat.data[r * width + off..r * width + off + a.cols].copy_from_slice(a.row(r));
                        off += a.cols;
                    }
                }
                let mut hidden = concat.matmul(w1);
                for r in 0..rows {
                    for (x, b) in hidden.data[r * hidden.cols..(r + 1) * hidden.cols].iter_mut().zip(b1) {
                        *x = (*x + b).tanh();
                    }
                }
                let mut z = hidden.matmul(w2);
                for r in 0..rows {
                    for (x, b) in z.data[r * z.cols..(r + 1) * z.cols].iter_mut().zip(b2) {
                        *x += b;
                    }
                }
                (
                    z,
                    TopCache {
                        concat: Some(concat),
                        hidden: Some(hidden),
                    },
                )
            }
        }
    }

    /// Backward pass given `dz`; `widths` are the bottom output widths.
    pub fn backward(&self, cache: &TopCache, dz: &Mat, widths: &[usize]) -> TopGrads {
        match self {
            Top::Sum { bias } => {
                let mut db = vec![0.0; bias.len()];
                for r in 0..dz.rows {
                    for (g, x) in db.iter_mut().zip(dz.row(r)) {
                        *g += x;
                    }
                }
                TopGrads {
                    flat: db,
                    d_acts: widths.iter().map(|_| dz.clone()).collect(),
                }
            }
            Top::Mlp { w1, w2, .. } => {
                let concat = cache.concat.as_ref().expect("mlp cache");
                let hidden = cache.hidden.as_ref().expect("mlp cache");
                let dw2 = hidden.t_matmul(dz);
                let db2 = column_sums(dz);
                let mut dpre = dz.matmul_t(w2);
                for (g, h) in dpre.data.iter_mut().zip(&hidden.data) {
                    *g *= 1.0 - h * h;
                }
                let dw1 = concat.t_matmul(&dpre);
                let db1 = column_sums(&dpre);
                let dconcat = dpre.matmul_t(w1);
                let mut d_acts = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in widths {
                    let mut m = Mat::zeros(dconcat.rows, w);
                    for r in 0..dconcat.rows {
                        m.data[r * w..(r + 1) * w].copy_from_slice(&dconcat.row(r)[off..off + w]);
                    }
                    d_acts.push(m);
                    off += w;
                }
                let mut flat = dw1.data;
                flat.extend(db1);
                flat.extend(dw2.data);
                flat.extend(db2);
                TopGrads { flat, d_acts }
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        match self {
            Top::Sum { bias } => bias.clone(),
            Top::Mlp { w1, b1, w2, b2 } => {
                let mut v = w1.data.clone();
                v.extend(b1);
                v.extend(&w2.data);
                v.extend(b2);
                v
            }
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        match self {
            Top::Sum { bias } => bias.copy_from_slice(flat),
            Top::Mlp { w1, b1, w2, b2 } => {
                let mut off = 0;
                for part in [&mut w1.data, b1, &mut w2.data, b2] {
                    let n = part.len();
                    part.copy_from_slice(&flat[off..off + n]);
                    off += n;
                }
            }
        }
    }

    /// `(name, shape)` per parameter block, in flat order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Top::Sum { bias } => vec![(String::from("top.bias"), vec![bias.len()])],
            Top::Mlp { w1, b1, w2, b2 } => vec![
                (String::from("top.w1"), vec![w1.rows, w1.cols]),
                (String::from("top.b1"), vec![b1.len()]),
                (String::from("top.w2"), vec![w2.rows, w2.cols]),
                (String::from("top.b2"), vec![b2.len()]),
            ],
        }
    }
}

fn column_sums(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (o, x) in out.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}

/// One client's bottom: `a = X W + b`. Linear models leave `b` empty because
/// the server-held bias already covers it.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottom {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Bottom {
    pub fn init(spec: &ModelSpec, client: usize, seed: u64) -> Self {
        let d = spec.client_dims[client];
        match spec.kind {
            ModelKind::Mlp => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(client as u64 + 1));
                Bottom {
                    w: glorot(&mut rng, d, spec.bottom_width),
                    b: vec![0.0; spec.bottom_width],
                }
            }
            _ => Bottom {
                w: Mat::zeros(d, spec.bottom_width),
                b: Vec::new(),
            },
        }
    }

    pub fn width(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut a = x.matmul(&self.w);
        if !self.b.is_empty() {
            for r in 0..a.rows {
                for (v, b) in a.data[r * a.cols..(r + 1) * a.cols].iter_mut().zip(&self.b) {
                    *v += b;
                }
            }
        }
        a
    }

    /// Flat gradient (`dW` then `db`) for upstream gradient `d_act`.
    pub fn backward(&self, x: &Mat, d_act: &Mat) -> Vec<f64> {
        let mut g = x.t_matmul(d_act).data;
        if !self.b.is_empty() {
            g.extend(column_sums(d_act));
        }
        g
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.w.data.clone();
        v.extend(&self.b);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.w.data.len();
        self.w.data.copy_from_slice(&flat[..n]);
        self.b.copy_from_slice(&flat[n..]);
    }

    pub fn num_params(&self) -> usize {
        self.w.data.len() + self.b.len()
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted loss `Σ w_i L_i` and its gradient with respect to `z`.
pub fn weighted_loss(loss: LossKind, z: &Mat, labels: &[Label], weights: &[f64]) -> (f64, Mat) {
    assert_eq!(z.rows, labels.len());
    assert_eq!(z.rows, weights.len());
    let mut total = 0.0;
    let mut dz = Mat::zeros(z.rows, z.cols);
    for (i, (label, w)) in labels.iter().zip(weights).enumerate() {
        let zi = z.row(i);
        let gi = &mut dz.data[i * z.cols..(i + 1) * z.cols];
        match loss {
            LossKind::Bce => {
                let y = label.as_f64();
                total += w * (softplus(zi[0]) - y * zi[0]);
                gi[0] = w * (sigmoid(zi[0]) - y);
            }
            LossKind::SoftmaxCe => {
                let y = label.class().unwrap_or(0);
                let max = zi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = zi.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                total += w * (lse - zi[y]);
                for (k, g) in gi.iter_mut().enumerate() {
                    let p = (zi[k] - lse).exp();
                    *g = w * (p - if k == y { 1.0 } else { 0.0 });
                }
            }
            LossKind::Squared => {
                let diff = zi[0] - label.as_f64();
                total += w * diff * diff;
                gi[0] = w * 2.0 * diff;
            }
        }
    }
    (total, dz)
}

/// Point prediction from one output row.
pub fn predict_row(loss: LossKind, z: &[f64]) -> Label {
    match loss {
        LossKind::Bce => Label::Class((z[0] > 0.0) as usize),
        LossKind::SoftmaxCe => {
            let mut best = 0;
            for (k, v) in z.iter().enumerate() {
                if *v > z[best] {
                    best = k;
                }
            }
            Label::Class(best)
        }
        LossKind::Squared => Label::Value(z[0]),
    }
}

/// The whole model in one place (for evaluation, dumps and gradient checks).
#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel {
    pub spec: ModelSpec,
    pub bottoms: Vec<Bottom>,
    pub top: Top,
}

pub struct Gradients {
    pub bottoms: Vec<Vec<f64>>,
    pub top: Vec<f64>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.bottoms.concat();
        v.extend(&self.top);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Flat parameter arrays with a shape manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDump {
    pub kind: ModelKind,
    pub entries: Vec<ParamEntry>,
}

impl SplitModel {
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let bottoms = (0..spec.clients()).map(|m| Bottom::init(&spec, m, seed)).collect();
        let top = Top::init(&spec, seed);
        SplitModel { spec, bottoms, top }
    }

    fn widths(&self) -> Vec<usize> {
        self.bottoms.iter().map(Bottom::width).collect()
    }

    /// Outputs for per-client feature blocks `xs` (each B×d_m).
    pub fn forward(&self, xs: &[Mat]) -> Mat {
        let acts: Vec<Mat> = xs.iter().zip(&self.bottoms).map(|(x, b)| b.forward(x)).collect();
        self.top.forward(&acts).0
    }

    pub fn loss_and_grad(&self, xs: &[Mat], labels: &[Label], weights: &[f64]) -> (f64, Gradients) {
        let acts: Vec<Mat> = xs.iter().zip(&self.bottoms).map(|(x, b)| b.forward(x)).collect();
        let (z, cache) = self.top.forward(&acts);
        let (loss, dz) = weighted_loss(self.spec.loss, &z, labels, weights);
        let tg = self.top.backward(&cache, &dz, &self.widths());
        let bottoms = self
            .bottoms
            .iter()
            .zip(xs)
            .zip(&tg.d_acts)
            .map(|((b, x), d)| b.backward(x, d))
            .collect();
        (loss, Gradients { bottoms, top: tg.flat })
    }

    pub fn loss(&self, xs: &[Mat], labels: &[Label], weights: &[f64]) -> f64 {
        weighted_loss(self.spec.loss, &self.forward(xs), labels, weights).0
    }

    pub fn predict(&self, xs: &[Mat]) -> Vec<Label> {
        let z = self.forward(xs);
        (0..z.rows).map(|r| predict_row(self.spec.loss, z.row(r))).collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.bottoms.iter().flat_map(Bottom::flat).collect();
        v.extend(self.top.flat());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for b in &mut self.bottoms {
            let n = b.num_params();
            b.set_flat(&flat[off..off + n]);
            off += n;
        }
        self.top.set_flat(&flat[off..]);
    }

    pub fn num_params(&self) -> usize {
        self.flat().len()
    }

    pub fn dump(&self) -> ParamDump {
        let mut entries = Vec::new();
        for (m, b) in self.bottoms.iter().enumerate() {
            entries.push(ParamEntry {
                name: format!("bottom{}.w", m + 1),
                shape: vec![b.w.rows, b.w.cols],
                values: b.w.data.clone(),
            });
            if !b.b.is_empty() {
                entries.push(ParamEntry {
                    name: format!("bottom{}.b", m + 1),
                    shape: vec![b.b.len()],
                    values: b.b.clone(),
                });
            }
        }
        let top = self.top.flat();
        let mut off = 0;
        for (name, shape) in self.top.shapes() {
            let n: usize = shape.iter().product();
            entries.push(ParamEntry {
                name,
                shape,
                values: top[off..off + n].to_vec(),
            });
            off += n;
        }
        ParamDump {
            kind: self.spec.kind,
            entries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Mat {
            rows: 2,
            cols: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let b = Mat {
            rows: 3,
            cols: 2,
            data: vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0],
        };
        assert_eq!(a.matmul(&b).data, vec![58.0, 64.0, 139.0, 154.0]);
        let at = Mat {
            rows: 3,
            cols: 2,
            data: vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0],
        };
        assert_eq!(at.t_matmul(&b).data, a.matmul(&b).data);
        let bt = Mat {
            rows: 2,
            cols: 3,
            data: vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0],
        };
        assert_eq!(a.matmul_t(&bt).data, a.matmul(&b).data);
    }

    #[test]
    fn zero_lr_loss_is_ln2_per_weight() {
        let spec = ModelSpec::new(
            ModelKind::LogisticRegression,
            vec![2, 1],
            Task::Classification { classes: 2 },
            16,
        );
        let model = SplitModel::init(spec, 0);
        let xs = vec![
            Mat::from_rows(&[&[1.0, 2.0], &[3.0, -1.0]], 2),
            Mat::from_rows(&[&[0.5], &[-2.0]], 1),
        ];
        let labels = [Label::Class(0), Label::Class(1)];
        let w = [0.5, 2.0];
        let loss = model.loss(&xs, &labels, &w);
        assert!((loss - std::f64::consts::LN_2 * 2.5).abs() < 1e-15);
    }

    #[test]
    fn flat_round_trip_and_dump_shapes() {
        let spec = ModelSpec::new(ModelKind::Mlp, vec![3, 2], Task::Classification { classes: 3 }, 4);
        let mut model = SplitModel::init(spec, 5);
        let flat: Vec<f64> = (0..model.num_params()).map(|i| i as f64).collect();
        model.set_flat(&flat);
        assert_eq!(model.flat(), flat);
        let dump = model.dump();
        let total: usize = dump.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        assert_eq!(total, flat.len());
        assert_eq!(dump.entries[0].shape, vec![3, 4]);
        assert_eq!(dump.entries[1].name, "bottom1.b");
        assert_eq!(dump.entries[4].name, "top.w1");
        assert_eq!(dump.entries[4].shape, vec![8, 4]);
    }

    #[test]
    fn spec_picks_heads() {
        let binary = Task::Classification { classes: 2 };
        let multi = Task::Classification { classes: 4 };
        let s = ModelSpec::new(ModelKind::LogisticRegression, vec![1], binary, 16);
        assert_eq!((s.outputs, s.loss, s.bottom_width), (1, LossKind::Bce, 1));
        let s = ModelSpec::new(ModelKind::LogisticRegression, vec![1], multi, 16);
        assert_eq!((s.outputs, s.loss, s.bottom_width), (4, LossKind::SoftmaxCe, 4));
        let s = ModelSpec::new(ModelKind::Mlp, vec![1], binary, 16);
        assert_eq!((s.outputs, s.loss, s.bottom_width), (2, LossKind::SoftmaxCe, 16));
        let s = ModelSpec::new(ModelKind::Mlp, vec![1], Task::Regression, 8);
        assert_eq!((s.outputs, s.loss, s.bottom_width), (1, LossKind::Squared, 8));
    }

    #[test]
    fn stable_sigmoid_and_softplus() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }
}
