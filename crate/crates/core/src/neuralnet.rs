//! Small recurrent forecasters: LSTM, BiLSTM and BiLSTM with scaled
//! dot-product self-attention, trained by backpropagation through time.
//!
//! Cell update over `z = [h_{t−1}, x_t]`:
//! `i, f, o = σ(W·z + b)`, `C̃ = tanh(W_c·z + b_c)`,
//! `C_t = f ⊙ C_{t−1} + i ⊙ C̃`, `h_t = o ⊙ tanh(C_t)`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Row-major matrix; vectors are `1 × n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { shape: [rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Tensor { shape: [rows.len(), cols], data: rows.iter().flatten().copied().collect() }
    }

    fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor { shape: [rows, cols], data }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.shape[1]..(r + 1) * self.shape[1]]
    }

    fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * m..(p + 1) * m];
                for (o, b) in out.data[i * m..(i + 1) * m].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    fn transpose(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(m, n);
        for i in 0..n {
            for j in 0..m {
                out.data[j * n + i] = self.data[i * m + j];
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GATE_I: usize = 0;
const GATE_F: usize = 1;
const GATE_O: usize = 2;
const GATE_C: usize = 3;

/// One LSTM layer; gate tensors in the order i, f, o, c. Each `w` is
/// `H × (H + input)` acting on `[h_{t−1}, x_t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub hidden: usize,
    pub input: usize,
    pub w: [Tensor; 4],
    pub b: [Tensor; 4],
}

impl LstmCellParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = std::array::from_fn(|_| Tensor::zeros(hidden, hidden + input));
        let b = std::array::from_fn(|_| Tensor::zeros(1, hidden));
        LstmCellParams { hidden, input, w, b }
    }

    /// Uniform(±1/√fan_in) weights, forget bias +1.
    pub fn init(hidden: usize, input: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((hidden + input) as f64).sqrt();
        let w = std::array::from_fn(|_| Tensor::uniform(hidden, hidden + input, bound, rng));
        let mut b: [Tensor; 4] = std::array::from_fn(|_| Tensor::uniform(1, hidden, bound, rng));
        b[GATE_F].data.iter_mut().for_each(|v| *v = 1.0);
        LstmCellParams { hidden, input, w, b }
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.w.iter().chain(self.b.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: vec![0.0; hidden], c: vec![0.0; hidden] }
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    z: Vec<f64>,
    gates: [Vec<f64>; 4],
    c_prev: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn step_cached(p: &LstmCellParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
    let hsz = p.hidden;
    let mut z = Vec::with_capacity(hsz + p.input);
    z.extend_from_slice(h_prev);
    z.extend_from_slice(x);
    let gates: [Vec<f64>; 4] = std::array::from_fn(|g| {
        (0..hsz)
            .map(|j| {
                let a = p.b[g].data[j] + p.w[g].row(j).iter().zip(&z).map(|(w, v)| w * v).sum::<f64>();
                if g == GATE_C {
                    a.tanh()
                } else {
                    sigmoid(a)
                }
            })
            .collect()
    });
    let c: Vec<f64> = (0..hsz).map(|j| gates[GATE_F][j] * c_prev[j] + gates[GATE_I][j] * gates[GATE_C][j]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h = (0..hsz).map(|j| gates[GATE_O][j] * tanh_c[j]).collect();
    StepCache { z, gates, c_prev: c_prev.to_vec(), c, tanh_c, h }
}

fn check_cell(p: &LstmCellParams) -> Result<()> {
    if p.tensors().any(|t| t.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("non-finite LSTM parameter".into()));
    }
    let (h, d) = (p.hidden, p.input);
    if p.w.iter().any(|w| w.shape != [h, h + d]) || p.b.iter().any(|b| b.shape != [1, h]) {
        return Err(Error::Shape(format!("LSTM tensors do not match hidden {h} and input {d}")));
    }
    Ok(())
}

pub fn lstm_step(p: &LstmCellParams, x: &[f64], state: &LstmState) -> Result<LstmState> {
    check_cell(p)?;
    if x.len() != p.input || state.h.len() != p.hidden || state.c.len() != p.hidden {
        return Err(Error::Shape("input or state width does not match the cell".into()));
    }
    let s = step_cached(p, x, &state.h, &state.c);
    Ok(LstmState { h: s.h, c: s.c })
}

fn run_cell<'a>(p: &LstmCellParams, seq: impl Iterator<Item = &'a [f64]>) -> Vec<StepCache> {
    let mut h = vec![0.0; p.hidden];
    let mut c = vec![0.0; p.hidden];
    let mut out = Vec::new();
    for x in seq {
        let s = step_cached(p, x, &h, &c);
        h.clone_from(&s.h);
        c.clone_from(&s.c);
        out.push(s);
    }
    out
}

fn check_seq(p: &LstmCellParams, seq: &[Vec<f64>]) -> Result<()> {
    check_cell(p)?;
    if seq.is_empty() {
        return Err(Error::Shape("empty sequence".into()));
    }
    if seq.iter().any(|x| x.len() != p.input) {
        return Err(Error::Shape(format!("sequence rows must have width {}", p.input)));
    }
    Ok(())
}

/// Hidden states from a zero initial state.
pub fn lstm_forward(p: &LstmCellParams, seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_seq(p, seq)?;
    Ok(run_cell(p, seq.iter().map(Vec::as_slice)).into_iter().map(|s| s.h).collect())
}

/// Per position `t`: `[h_fwd(t), h_bwd(t)]`, where the backward cell has read
/// the sequence from its end down to `t`.
pub fn bilstm_forward(fwd: &LstmCellParams, bwd: &LstmCellParams, seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_seq(fwd, seq)?;
    check_seq(bwd, seq)?;
    let f = run_cell(fwd, seq.iter().map(Vec::as_slice));
    let b = run_cell(bwd, seq.iter().rev().map(Vec::as_slice));
    let n = seq.len();
    Ok((0..n).map(|t| [f[t].h.as_slice(), b[n - 1 - t].h.as_slice()].concat()).collect())
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let m = logits.cols();
    for row in out.data.chunks_mut(m) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// `softmax(Q Kᵀ / √d_k) V`; also returns the weight matrix.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let dk = q.cols();
    if dk == 0 || k.cols() != dk {
        return Err(Error::Shape(format!("Q and K need equal non-zero width ({} vs {})", dk, k.cols())));
    }
    if k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::Shape("K and V need the same non-zero row count".into()));
    }
    let mut logits = q.matmul(&k.transpose());
    let scale = 1.0 / (dk as f64).sqrt();
    logits.data.iter_mut().for_each(|x| *x *= scale);
    let weights = softmax_rows(&logits);
    Ok((weights.matmul(v), weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lstm,
    Bilstm,
    Attlstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    #[default]
    Mae,
    Mse,
}

impl Loss {
    fn value_and_grad(self, pred: f64, target: f64) -> (f64, f64) {
        let e = pred - target;
        match self {
            Loss::Mae => (e.abs(), if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 }),
            Loss::Mse => (e * e, 2.0 * e),
        }
    }
}

/// Column z-scores for inputs and target; statistics come from training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count().max(1) as f64;
    let m = v.clone().sum::<f64>() / n;
    let s = (v.map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    (m, if s > 1e-12 { s } else { 1.0 })
}

impl Scaler {
    pub fn fit(fm: &FeatureMatrix, rows: &[usize]) -> Self {
        let w = fm.width();
        let (mean, std) = (0..w).map(|j| mean_std(rows.iter().map(|&i| fm.data[i * w + j]))).unzip();
        let (target_mean, target_std) = mean_std(rows.iter().map(|&i| fm.target[i]));
        Scaler { mean, std, target_mean, target_std }
    }

    fn row(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceModel {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub fwd: LstmCellParams,
    pub bwd: Option<LstmCellParams>,
    /// Attention projections, each `2H × d`.
    pub w_q: Option<Tensor>,
    pub w_k: Option<Tensor>,
    pub w_v: Option<Tensor>,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
}

impl SequenceModel {
    pub fn new(kind: ModelKind, input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fwd = LstmCellParams::init(hidden, input_dim, &mut rng);
        let bwd = (kind != ModelKind::Lstm).then(|| LstmCellParams::init(hidden, input_dim, &mut rng));
        let span = 2 * hidden;
        let bound = 1.0 / (span as f64).sqrt();
        let mut proj = || (kind == ModelKind::Attlstm).then(|| Tensor::uniform(span, hidden, bound, &mut rng));
        let (w_q, w_k, w_v) = (proj(), proj(), proj());
        let head = match kind {
            ModelKind::Lstm | ModelKind::Attlstm => hidden,
            ModelKind::Bilstm => span,
        };
        let hb = 1.0 / (head as f64).sqrt();
        let dense_w = Tensor::uniform(1, head, hb, &mut rng);
        let dense_b = Tensor::zeros(1, 1);
        SequenceModel { kind, input_dim, hidden, fwd, bwd, w_q, w_k, w_v, dense_w, dense_b }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let gates = ["i", "f", "o", "c"];
        let mut names = Vec::new();
        for (prefix, present) in [("fwd", true), ("bwd", self.bwd.is_some())] {
            if present {
                names.extend(gates.iter().map(|g| format!("{prefix}.w_{g}")));
                names.extend(gates.iter().map(|g| format!("{prefix}.b_{g}")));
            }
        }
        for (n, t) in [("att.w_q", &self.w_q), ("att.w_k", &self.w_k), ("att.w_v", &self.w_v)] {
            if t.is_some() {
                names.push(n.into());
            }
        }
        names.push("dense.w".into());
        names.push("dense.b".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.fwd.tensors().collect();
        if let Some(b) = &self.bwd {
            v.extend(b.tensors());
        }
        v.extend([&self.w_q, &self.w_k, &self.w_v].into_iter().flatten());
        v.push(&self.dense_w);
        v.push(&self.dense_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.fwd.tensors_mut().collect();
        if let Some(b) = &mut self.bwd {
            v.extend(b.tensors_mut());
        }
        v.extend([&mut self.w_q, &mut self.w_k, &mut self.w_v].into_iter().flatten());
        v.push(&mut self.dense_w);
        v.push(&mut self.dense_b);
        v
    }

    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.tensors_mut().into_iter().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        g
    }

    pub fn predict(&self, seq: &[Vec<f64>]) -> Result<f64> {
        check_seq(&self.fwd, seq)?;
        Ok(self.forward(seq).y)
    }

    fn forward(&self, seq: &[Vec<f64>]) -> Forward {
        let f = run_cell(&self.fwd, seq.iter().map(Vec::as_slice));
        let b = self.bwd.as_ref().map(|p| run_cell(p, seq.iter().rev().map(Vec::as_slice)));
        let n = seq.len();
        let dot = |w: &[f64], x: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        match self.kind {
            ModelKind::Lstm => {
                let y = dot(&self.dense_w.data, &f[n - 1].h) + self.dense_b.data[0];
                Forward { f, b, att: None, y }
            }
            ModelKind::Bilstm => {
                let b = b.expect("backward cell");
                let z = [f[n - 1].h.as_slice(), b[n - 1].h.as_slice()].concat();
                let y = dot(&self.dense_w.data, &z) + self.dense_b.data[0];
                Forward { f, b: Some(b), att: None, y }
            }
            ModelKind::Attlstm => {
                let bc = b.expect("backward cell");
                let s = Tensor::from_rows(&(0..n).map(|t| [f[t].h.as_slice(), bc[n - 1 - t].h.as_slice()].concat()).collect::<Vec<_>>());
                let q = s.matmul(self.w_q.as_ref().expect("w_q"));
                let k = s.matmul(self.w_k.as_ref().expect("w_k"));
                let v = s.matmul(self.w_v.as_ref().expect("w_v"));
                let (o, a) = attention(&q, &k, &v).expect("attention shapes");
                let d = o.cols();
                let pooled: Vec<f64> = (0..d).map(|j| (0..n).map(|t| o.at(t, j)).sum::<f64>() / n as f64).collect();
                let y = dot(&self.dense_w.data, &pooled) + self.dense_b.data[0];
                Forward { f, b: Some(bc), att: Some(AttCache { s, q, k, v, a }), y }
            }
        }
    }

    /// Accumulate `dy · ∂y/∂θ` into `grad`.
    #[allow(clippy::needless_range_loop)]
    fn backward(&self, fw: &Forward, dy: f64, grad: &mut SequenceModel, fault: bool) {
        let n = fw.f.len();
        let h = self.hidden;
        let mut dh_f = vec![vec![0.0; h]; n];
        let mut dh_b = vec![vec![0.0; h]; n]; // indexed by backward step
        grad.dense_b.data[0] += dy;
        match self.kind {
            ModelKind::Lstm => {
                for j in 0..h {
                    grad.dense_w.data[j] += dy * fw.f[n - 1].h[j];
                    dh_f[n - 1][j] = dy * self.dense_w.data[j];
                }
            }
            ModelKind::Bilstm => {
                let b = fw.b.as_ref().expect("backward cache");
                for j in 0..h {
                    grad.dense_w.data[j] += dy * fw.f[n - 1].h[j];
                    grad.dense_w.data[h + j] += dy * b[n - 1].h[j];
                    dh_f[n - 1][j] = dy * self.dense_w.data[j];
                    dh_b[n - 1][j] = dy * self.dense_w.data[h + j];
                }
            }
            ModelKind::Attlstm => {
                let c = fw.att.as_ref().expect("attention cache");
                let (wq, wk, wv) = (self.w_q.as_ref().unwrap(), self.w_k.as_ref().unwrap(), self.w_v.as_ref().unwrap());
                let d = wv.cols();
                let o = c.a.matmul(&c.v);
                for j in 0..d {
                    let pooled = (0..n).map(|t| o.at(t, j)).sum::<f64>() / n as f64;
                    grad.dense_w.data[j] += dy * pooled;
                }
                let mut d_o = Tensor::zeros(n, d);
                for t in 0..n {
                    for j in 0..d {
                        d_o.data[t * d + j] = dy * self.dense_w.data[j] / n as f64;
                    }
                }
                let d_v = c.a.transpose().matmul(&d_o);
                let d_a = d_o.matmul(&c.v.transpose());
                let mut d_l = Tensor::zeros(n, n);
                for t in 0..n {
                    let dot: f64 = (0..n).map(|u| d_a.at(t, u) * c.a.at(t, u)).sum();
                    for u in 0..n {
                        d_l.data[t * n + u] = c.a.at(t, u) * (d_a.at(t, u) - dot);
                    }
                }
                let scale = 1.0 / (d as f64).sqrt();
                d_l.data.iter_mut().for_each(|x| *x *= scale);
                let d_q = d_l.matmul(&c.k);
                let d_k = d_l.transpose().matmul(&c.q);
                let st = c.s.transpose();
                for (g, dm) in [(&mut grad.w_q, &d_q), (&mut grad.w_k, &d_k), (&mut grad.w_v, &d_v)] {
                    let upd = st.matmul(dm);
                    for (a, b) in g.as_mut().unwrap().data.iter_mut().zip(&upd.data) {
                        *a += b;
                    }
                }
                let d_s = {
                    let mut x = d_q.matmul(&wq.transpose());
                    for (a, b) in x.data.iter_mut().zip(d_k.matmul(&wk.transpose()).data) {
                        *a += b;
                    }
                    for (a, b) in x.data.iter_mut().zip(d_v.matmul(&wv.transpose()).data) {
                        *a += b;
                    }
                    x
                };
                for t in 0..n {
                    for j in 0..h {
                        dh_f[t][j] = d_s.at(t, j);
                        dh_b[n - 1 - t][j] = d_s.at(t, h + j);
                    }
                }
            }
        }
        cell_backward(&self.fwd, &fw.f, &dh_f, &mut grad.fwd, fault);
        if let (Some(p), Some(cache), Some(g)) = (&self.bwd, &fw.b, &mut grad.bwd) {
            cell_backward(p, cache, &dh_b, g, fault);
        }
    }
}

struct AttCache {
    s: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    a: Tensor,
}

struct Forward {
    f: Vec<StepCache>,
    b: Option<Vec<StepCache>>,
    att: Option<AttCache>,
    y: f64,
}

#[allow(clippy::needless_range_loop)]
fn cell_backward(p: &LstmCellParams, steps: &[StepCache], dh_out: &[Vec<f64>], g: &mut LstmCellParams, fault: bool) {
    let h = p.hidden;
    let width = h + p.input;
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; h]);
    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        for j in 0..h {
            let dh = dh_out[t][j] + dh_next[j];
            let (i, f, o, cand) = (s.gates[GATE_I][j], s.gates[GATE_F][j], s.gates[GATE_O][j], s.gates[GATE_C][j]);
            let dc = dh * o * (1.0 - s.tanh_c[j] * s.tanh_c[j]) + dc_next[j];
            da[GATE_O][j] = dh * s.tanh_c[j] * o * (1.0 - o);
            da[GATE_I][j] = dc * cand * i * (1.0 - i);
            da[GATE_F][j] = dc * s.c_prev[j] * f * (1.0 - f);
            da[GATE_C][j] = dc * i * (1.0 - cand * cand);
            dc_next[j] = dc * f;
        }
        let mut dz = vec![0.0; width];
        for gate in 0..4 {
            let k = if fault && gate == GATE_F { 2.0 } else { 1.0 };
            for j in 0..h {
                let a = da[gate][j];
                if a == 0.0 {
                    continue;
                }
                g.b[gate].data[j] += k * a;
                let row = &mut g.w[gate].data[j * width..(j + 1) * width];
                for (r, z) in row.iter_mut().zip(&s.z) {
                    *r += k * a * z;
                }
                for (d, w) in dz.iter_mut().zip(p.w[gate].row(j)) {
                    *d += a * w;
                }
            }
        }
        dh_next.copy_from_slice(&dz[..h]);
    }
}

/// Mean loss over a batch and its gradient.
fn batch_gradient(model: &SequenceModel, batch: &[(&[Vec<f64>], f64)], loss: Loss, fault: bool) -> (f64, SequenceModel) {
    let mut grad = model.zeros_like();
    let mut total = 0.0;
    let n = batch.len() as f64;
    for (seq, target) in batch {
        let fw = model.forward(seq);
        let (l, dl) = loss.value_and_grad(fw.y, *target);
        total += l;
        model.backward(&fw, dl / n, &mut grad, fault);
    }
    (total / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_tensor: String,
}

/// Central differences against the analytic gradient of the mean squared
/// error over `batch`, for every parameter.
pub fn grad_check(model: &SequenceModel, batch: &[(Vec<Vec<f64>>, f64)], epsilon: f64, inject_fault: bool) -> Result<GradCheck> {
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-6, 1e-4]")));
    }
    for (seq, _) in batch {
        check_seq(&model.fwd, seq)?;
    }
    let refs: Vec<(&[Vec<f64>], f64)> = batch.iter().map(|(s, t)| (s.as_slice(), *t)).collect();
    let (_, analytic) = batch_gradient(model, &refs, Loss::Mse, inject_fault);
    let loss_at = |m: &SequenceModel| batch_gradient(m, &refs, Loss::Mse, false).0;
    let names = model.tensor_names();
    let mut probe = model.clone();
    let mut worst = GradCheck { max_relative_error: 0.0, worst_tensor: String::new() };
    let grads = analytic.tensors();
    for (ti, name) in names.iter().enumerate() {
        for e in 0..grads[ti].data.len() {
            let orig = probe.tensors()[ti].data[e];
            probe.tensors_mut()[ti].data[e] = orig + epsilon;
            let up = loss_at(&probe);
            probe.tensors_mut()[ti].data[e] = orig - epsilon;
            let down = loss_at(&probe);
            probe.tensors_mut()[ti].data[e] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = grads[ti].data[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst.max_relative_error {
                worst = GradCheck { max_relative_error: rel, worst_tensor: name.clone() };
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub units: usize,
    pub loss: Loss,
    pub epochs: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Trailing share of training windows held out for validation.
    pub val_fraction: f64,
    /// Keep every `stride`-th window.
    pub stride: usize,
    /// Cap on training windows, drawn evenly across the span.
    pub max_windows: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            units: 50,
            loss: Loss::Mae,
            epochs: 50,
            batch: 72,
            seq_len: 90,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            val_fraction: 0.1,
            stride: 1,
            max_windows: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.epochs == 0 || self.batch == 0 || self.seq_len == 0 || self.stride == 0 {
            return Err(Error::Config("units, epochs, batch, seq_len and stride must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("learning rate must be >= 0 and val_fraction in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn write_loss_curve<W: Write>(curve: &[EpochLoss], mut out: W, run_id: Option<&str>) -> Result<()> {
    if let Some(id) = run_id {
        writeln!(out, "# run_id={id}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for e in curve {
        w.write_record([e.epoch.to_string(), format!("{:.8}", e.train_loss), format!("{:.8}", e.val_loss)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedNet {
    pub model: SequenceModel,
    pub scaler: Scaler,
    pub seq_len: usize,
    pub curve: Vec<EpochLoss>,
}

/// Rows `r` whose preceding `len − 1` rows are contiguous on the frame grid.
pub fn window_ends(fm: &FeatureMatrix, len: usize) -> Vec<usize> {
    (len.saturating_sub(1)..fm.n_rows())
        .filter(|&r| fm.frame_rows[r] - fm.frame_rows[r + 1 - len] == len - 1)
        .collect()
}

fn window(fm: &FeatureMatrix, scaler: &Scaler, end: usize, len: usize) -> Vec<Vec<f64>> {
    (end + 1 - len..=end).map(|i| scaler.row(fm.row(i))).collect()
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &SequenceModel) -> Self {
        let z: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Adam { m: z.clone(), v: z, t: 0 }
    }

    fn step(&mut self, model: &mut SequenceModel, grad: &SequenceModel, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, (p, g)) in model.tensors_mut().into_iter().zip(grad.tensors()).enumerate() {
            for (e, (w, gv)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[k][e];
                let v = &mut self.v[k][e];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gv;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gv * gv;
                *w -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Train on windows ending at `rows` of `fm` (typically the training split).
pub fn train(kind: ModelKind, fm: &FeatureMatrix, rows: &[usize], config: &TrainConfig) -> Result<TrainedNet> {
    config.validate()?;
    let len = config.seq_len;
    let allowed: std::collections::HashSet<usize> = rows.iter().copied().collect();
    let mut ends: Vec<usize> = window_ends(fm, len)
        .into_iter()
        .filter(|r| allowed.contains(r) && allowed.contains(&(r + 1 - len)))
        .step_by(config.stride)
        .collect();
    if let Some(cap) = config.max_windows {
        if ends.len() > cap && cap > 0 {
            let n = ends.len();
            ends = (0..cap).map(|i| ends[i * n / cap]).collect();
        }
    }
    let n_val = ((ends.len() as f64) * config.val_fraction).floor() as usize;
    if ends.len() < 2 || ends.len() - n_val == 0 {
        return Err(Error::Sizing(format!("only {} training windows of length {len}", ends.len())));
    }
    let scaler = Scaler::fit(fm, rows);
    let make = |e: usize| (window(fm, &scaler, e, len), (fm.target[e] - scaler.target_mean) / scaler.target_std);
    let data: Vec<(Vec<Vec<f64>>, f64)> = ends.iter().map(|&e| make(e)).collect();
    let (train_set, val_set) = data.split_at(data.len() - n_val);

    let mut model = SequenceModel::new(kind, fm.width(), config.units, config.seed);
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch) {
            let batch: Vec<(&[Vec<f64>], f64)> = chunk.iter().map(|&i| (train_set[i].0.as_slice(), train_set[i].1)).collect();
            let (l, grad) = batch_gradient(&model, &batch, config.loss, false);
            if !l.is_finite() {
                return Err(Error::Numeric(format!("training diverged at epoch {epoch}: loss {l}")));
            }
            sum += l * chunk.len() as f64;
            adam.step(&mut model, &grad, config);
        }
        let train_loss = sum / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            f64::NAN
        } else {
            val_set.iter().map(|(s, t)| config.loss.value_and_grad(model.forward(s).y, *t).0).sum::<f64>() / val_set.len() as f64
        };
        if model.tensors().iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        curve.push(EpochLoss { epoch, train_loss, val_loss });
    }
    Ok(TrainedNet { model, scaler, seq_len: len, curve })
}

impl TrainedNet {
    /// Forecast for row `end` of `fm`, or `None` without a full window.
    pub fn predict_row(&self, fm: &FeatureMatrix, end: usize) -> Option<f64> {
        let len = self.seq_len;
        if end + 1 < len || fm.frame_rows[end] - fm.frame_rows[end + 1 - len] != len - 1 {
            return None;
        }
        let seq = window(fm, &self.scaler, end, len);
        Some(self.model.forward(&seq).y * self.scaler.target_std + self.scaler.target_mean)
    }

    /// Forecast from `seq_len` unscaled feature rows, oldest first.
    pub fn predict_window(&self, rows: &[Vec<f64>]) -> Result<f64> {
        if rows.len() != self.seq_len {
            return Err(Error::Shape(format!("window of {} rows, model expects {}", rows.len(), self.seq_len)));
        }
        let seq: Vec<Vec<f64>> = rows.iter().map(|r| self.scaler.row(r)).collect();
        Ok(self.model.predict(&seq)? * self.scaler.target_std + self.scaler.target_mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_seq(len: usize, width: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn zero_cell_step() {
        let p = LstmCellParams::zeros(3, 2);
        let s = step_cached(&p, &[0.0, 0.0], &[0.0; 3], &[0.0; 3]);
        assert!(s.gates[GATE_I].iter().chain(&s.gates[GATE_F]).chain(&s.gates[GATE_O]).all(|g| *g == 0.5));
        assert!(s.gates[GATE_C].iter().chain(&s.c).chain(&s.h).all(|v| *v == 0.0));
        assert!(lstm_forward(&p, &rand_seq(5, 2, 1)).unwrap().iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = LstmCellParams::init(4, 2, &mut rng);
        p.b[GATE_F].data.iter_mut().for_each(|v| *v = 100.0);
        let prev = LstmState { h: vec![0.1, -0.2, 0.3, 0.0], c: vec![0.5, -1.5, 2.0, 0.1] };
        let s = step_cached(&p, &[0.3, -0.7], &prev.h, &prev.c);
        for j in 0..4 {
            let expect = prev.c[j] + s.gates[GATE_I][j] * s.gates[GATE_C][j];
            assert!((s.c[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_cell_by_hand() {
        let mut p = LstmCellParams::zeros(1, 1);
        // weights over [h, x]
        let w = [[0.5, -0.3], [0.2, 0.8], [-0.6, 0.4], [0.9, 0.1]];
        let b = [0.1, -0.2, 0.3, 0.05];
        for g in 0..4 {
            p.w[g].data = w[g].to_vec();
            p.b[g].data = vec![b[g]];
        }
        let (h0, c0, x) = (0.2, -0.4, 0.7);
        let pre = |g: usize| w[g][0] * h0 + w[g][1] * x + b[g];
        let i = 1.0 / (1.0 + (-pre(0)).exp());
        let f = 1.0 / (1.0 + (-pre(1)).exp());
        let o = 1.0 / (1.0 + (-pre(2)).exp());
        let cand = pre(3).tanh();
        let c = f * c0 + i * cand;
        let h = o * c.tanh();
        let s = lstm_step(&p, &[x], &LstmState { h: vec![h0], c: vec![c0] }).unwrap();
        assert!((s.c[0] - c).abs() < 1e-12 && (s.h[0] - h).abs() < 1e-12);
    }

    #[test]
    fn step_rejects_bad_params() {
        let mut p = LstmCellParams::zeros(2, 1);
        p.w[0].data[0] = f64::NAN;
        assert_eq!(lstm_step(&p, &[0.0], &LstmState::zeros(2)).unwrap_err().category(), "numeric");
        let p = LstmCellParams::zeros(2, 1);
        assert_eq!(lstm_forward(&p, &[]).unwrap_err().category(), "shape");
    }

    #[test]
    fn hidden_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = LstmCellParams::init(5, 3, &mut rng);
        p.tensors_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v *= 20.0));
        let out = lstm_forward(&p, &rand_seq(50, 3, 4)).unwrap();
        assert!(out.iter().flatten().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn bilstm_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = LstmCellParams::init(3, 2, &mut rng);
        let b = LstmCellParams::init(3, 2, &mut rng);
        let one = rand_seq(1, 2, 6);
        let out = bilstm_forward(&f, &b, &one).unwrap();
        let sf = lstm_step(&f, &one[0], &LstmState::zeros(3)).unwrap();
        let sb = lstm_step(&b, &one[0], &LstmState::zeros(3)).unwrap();
        assert_eq!(out[0], [sf.h, sb.h].concat());

        let seq = rand_seq(6, 2, 7);
        let rev: Vec<_> = seq.iter().rev().cloned().collect();
        let a = bilstm_forward(&f, &b, &seq).unwrap();
        let r = bilstm_forward(&b, &f, &rev).unwrap();
        for t in 0..6 {
            assert_eq!(a[t][..3], r[5 - t][3..]);
            assert_eq!(a[t][3..], r[5 - t][..3]);
        }

        let mut pal = rand_seq(3, 2, 8);
        pal.extend(pal.clone().into_iter().rev());
        let m = bilstm_forward(&f, &f, &pal).unwrap();
        for t in 0..6 {
            for j in 0..3 {
                assert!((m[t][j] - m[5 - t][3 + j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_examples() {
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![5.0, 0.0]]);
        let zeros = Tensor::zeros(3, 2);
        let (o, _) = attention(&zeros, &zeros, &v).unwrap();
        for t in 0..3 {
            assert!((o.at(t, 0) - 3.0).abs() < 1e-12 && (o.at(t, 1) + 2.0 / 3.0).abs() < 1e-12);
        }
        // Keys chosen so key 2 scores +30 above the others for every query.
        let q = Tensor::from_rows(&[vec![1.0], vec![1.0]]);
        let k = Tensor::from_rows(&[vec![0.0], vec![0.0], vec![30.0]]);
        let (o, _) = attention(&q, &k, &v).unwrap();
        assert!((o.at(0, 0) - 5.0).abs() < 1e-9 * 5.0 + 1e-9 && o.at(1, 1).abs() < 1e-9 * 4.0 + 1e-9);
        let q = Tensor::from_rows(&rand_seq(4, 3, 1));
        let k = Tensor::from_rows(&rand_seq(5, 3, 2));
        let vv = Tensor::from_rows(&rand_seq(5, 2, 3));
        let (o, a) = attention(&q, &k, &vv).unwrap();
        for t in 0..4 {
            assert!((a.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12 && a.row(t).iter().all(|x| *x >= 0.0));
            for j in 0..2 {
                let col: Vec<f64> = (0..5).map(|r| vv.at(r, j)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(o.at(t, j) >= lo - 1e-12 && o.at(t, j) <= hi + 1e-12);
            }
        }
        assert_eq!(attention(&Tensor::zeros(2, 0), &Tensor::zeros(2, 0), &v).unwrap_err().category(), "shape");
    }

    fn check_batch(width: usize, len: usize, seed: u64) -> Vec<(Vec<Vec<f64>>, f64)> {
        (0..3).map(|k| (rand_seq(len, width, seed * 10 + k), 0.3 * k as f64 - 0.4)).collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [ModelKind::Lstm, ModelKind::Bilstm, ModelKind::Attlstm] {
            for (h, len) in [(2, 1), (3, 4), (2, 7)] {
                let m = SequenceModel::new(kind, 3, h, 11 + len as u64);
                let r = grad_check(&m, &check_batch(3, len, h as u64), 1e-5, false).unwrap();
                assert!(r.max_relative_error < 1e-4, "{kind:?} H={h} T={len}: {r:?}");
            }
        }
    }

    #[test]
    fn corrupted_forget_gradient_is_caught() {
        for kind in [ModelKind::Lstm, ModelKind::Bilstm, ModelKind::Attlstm] {
            let m = SequenceModel::new(kind, 3, 3, 2);
            let r = grad_check(&m, &check_batch(3, 4, 1), 1e-5, true).unwrap();
            assert!(r.max_relative_error > 0.1, "{kind:?}: {r:?}");
            assert!(r.worst_tensor.contains("_f"), "{r:?}");
        }
    }

    #[test]
    fn zero_model_has_zero_gradient() {
        let mut m = SequenceModel::new(ModelKind::Attlstm, 2, 2, 0);
        m.tensors_mut().into_iter().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        let batch = vec![(vec![vec![0.0, 0.0]; 3], 0.0)];
        let r = grad_check(&m, &batch, 1e-5, false).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    fn toy_matrix(n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t0 = chrono::DateTime::from_timestamp(0, 0).unwrap();
        let data: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..n).map(|i| 0.5 * data[2 * i] - 0.2 * data[2 * i + 1] + 2.0).collect();
        FeatureMatrix {
            columns: vec!["a".into(), "b".into()],
            data,
            target,
            frame_rows: (0..n).collect(),
            timestamps: (0..n).map(|i| t0 + chrono::TimeDelta::minutes(i as i64)).collect(),
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig { units: 4, epochs: 5, batch: 16, seq_len: 4, learning_rate: 0.01, seed: 3, ..Default::default() }
    }

    #[test]
    fn zero_rate_keeps_parameters() {
        let fm = toy_matrix(80, 1);
        let rows: Vec<usize> = (0..80).collect();
        let cfg = TrainConfig { learning_rate: 0.0, ..small_config() };
        let net = train(ModelKind::Lstm, &fm, &rows, &cfg).unwrap();
        assert_eq!(net.model, SequenceModel::new(ModelKind::Lstm, 2, 4, 3));
        assert_eq!(net.curve.len(), 5);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let fm = toy_matrix(300, 2);
        let rows: Vec<usize> = (0..300).collect();
        let cfg = TrainConfig { epochs: 30, ..small_config() };
        let a = train(ModelKind::Attlstm, &fm, &rows, &cfg).unwrap();
        let b = train(ModelKind::Attlstm, &fm, &rows, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert!(a.curve.last().unwrap().train_loss < 0.5 * a.curve[0].train_loss);
        let back = TrainedNet::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back.predict_row(&fm, 100), a.predict_row(&fm, 100));
        assert_eq!(a.predict_row(&fm, 2), None);
        let mut buf = Vec::new();
        write_loss_curve(&a.curve, &mut buf, None).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 31);
    }

    #[test]
    fn memorizes_constant_target() {
        let mut fm = toy_matrix(40, 4);
        fm.target.iter_mut().for_each(|t| *t = 5.0);
        let rows: Vec<usize> = (0..40).collect();
        let cfg = TrainConfig { epochs: 50, learning_rate: 0.05, val_fraction: 0.0, ..small_config() };
        let net = train(ModelKind::Lstm, &fm, &rows, &cfg).unwrap();
        let mae = window_ends(&fm, 4).iter().map(|&r| (net.predict_row(&fm, r).unwrap() - 5.0).abs()).sum::<f64>() / 37.0;
        assert!(mae < 1e-2, "{mae}");
    }
}
