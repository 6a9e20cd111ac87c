//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation pushes one node holding its forward value and whatever it
//! needs for the backward pass. Node indices are a topological order by
//! construction, so `backward` is a single reverse sweep.

use super::matrix::dot;
use super::Matrix;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Entrywise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    /// Sigmoid of the input clamped to `[-RATE_CLAMP, RATE_CLAMP]`, so the
    /// result stays strictly inside (0, 1) at 64-bit.
    Rate,
}

pub const RATE_CLAMP: f64 = 30.0;
const SOFTPLUS_GUARD: f64 = 30.0;

pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_GUARD {
        x
    } else if x < -SOFTPLUS_GUARD {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn rate(x: f64) -> f64 {
    sigmoid(x.clamp(-RATE_CLAMP, RATE_CLAMP))
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Rate => rate(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Softplus => {
                if x > SOFTPLUS_GUARD {
                    1.0
                } else if x < -SOFTPLUS_GUARD {
                    y
                } else {
                    sigmoid(x)
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Rate => {
                if x.abs() > RATE_CLAMP {
                    0.0
                } else {
                    y * (1.0 - y)
                }
            }
        }
    }
}

/// Elementwise application of a [`Unary`] outside any tape.
pub fn elementwise(f: Unary, x: &Matrix) -> Matrix {
    x.map(|v| f.apply(v))
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Operation identity, used for fault injection and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNT,
    Add,
    Sub,
    Mul,
    MulConst,
    AddColBias,
    ScaleBy,
    DivBy,
    Unary(Unary),
    RowSums,
    MeanRows,
    SumAll,
    MaxAll,
    Gather,
    ConcatCols,
    LayerNorm,
    PairGate,
    GaussianDecay,
    Laplacian,
    CrossEntropy,
}

/// Scales the gradient flowing into input `input` of every `op` node during
/// backward. Exists so gradient checkers can be tested against a known-bad
/// backward rule.
#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub op: OpKind,
    pub input: usize,
    pub factor: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    AddColBias(Var, Var),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Unary(Unary, Var),
    RowSums(Var),
    MeanRows(Var),
    SumAll(Var),
    MaxAll {
        x: Var,
        argmax: Option<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    PairGate {
        p: Var,
        q: Var,
        w: Var,
        b: Var,
        // tanh(P_t + Q_s), laid out [t][s][j]; empty when not recording
        hidden: Vec<f64>,
    },
    GaussianDecay(Var),
    Laplacian {
        w: Var,
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::MulConst(..) => OpKind::MulConst,
            Op::AddColBias(..) => OpKind::AddColBias,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::DivBy(..) => OpKind::DivBy,
            Op::Unary(u, _) => OpKind::Unary(*u),
            Op::RowSums(_) => OpKind::RowSums,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::SumAll(_) => OpKind::SumAll,
            Op::MaxAll { .. } => OpKind::MaxAll,
            Op::Gather { .. } => OpKind::Gather,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::PairGate { .. } => OpKind::PairGate,
            Op::GaussianDecay(_) => OpKind::GaussianDecay,
            Op::Laplacian { .. } => OpKind::Laplacian,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
    fault: Option<Fault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that supports `backward`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            fault: None,
        }
    }

    /// A forward-only tape: large backward-only buffers are not kept and
    /// `backward` is refused.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Handles for every node pushed at or after index `start`.
    pub fn vars_from(&self, start: usize) -> Vec<Var> {
        (start..self.nodes.len()).map(Var).collect()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Entrywise product with a constant (no gradient flows into `c`).
    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Result<Var> {
        let v = self.value(x).hadamard(&c)?;
        Ok(self.push(v, Op::MulConst(x, c)))
    }

    /// Adds the column vector `bias` (n×1) to every row of `x` (T×n).
    pub fn add_col_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape() != (xv.cols(), 1) {
            return shape_err("add_col_bias", xv.shape(), bv.shape());
        }
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddColBias(x, bias)))
    }

    /// `x * s` for a 1×1 `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("scale_by", x, s)?;
        let v = self.value(x).scale(sv);
        Ok(self.push(v, Op::ScaleBy(x, s)))
    }

    /// `x / s` for a 1×1 `s`.
    pub fn div_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("div_by", x, s)?;
        let v = self.value(x).map(|e| e / sv);
        Ok(self.push(v, Op::DivBy(x, s)))
    }

    fn scalar_of(&self, op: &'static str, x: Var, s: Var) -> Result<f64> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return shape_err(op, self.shape(x), sv.shape());
        }
        Ok(sv.item())
    }

    pub fn unary(&mut self, f: Unary, x: Var) -> Var {
        let v = elementwise(f, self.value(x));
        self.push(v, Op::Unary(f, x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn rate(&mut self, x: Var) -> Var {
        self.unary(Unary::Rate, x)
    }

    /// Row sums as a T×1 column.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let v = self.value(x).row_sums();
        self.push(v, Op::RowSums(x))
    }

    /// Mean over rows of a T×n matrix, returned as an n×1 column.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let t = xv.rows() as f64;
        let mut v = Matrix::zeros(xv.cols(), 1);
        for r in 0..xv.rows() {
            for (o, x) in v.data_mut().iter_mut().zip(xv.row(r)) {
                *o += x;
            }
        }
        let v = v.map(|s| s / t);
        Ok(self.push(v, Op::MeanRows(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    /// `max(max_i x_i, floor)` as a 1×1; the gradient flows to the first
    /// maximising entry, or nowhere when the floor wins.
    pub fn max_all(&mut self, x: Var, floor: f64) -> Var {
        let mut best = floor;
        let mut argmax = None;
        for (i, &e) in self.value(x).data().iter().enumerate() {
            if e > best {
                best = e;
                argmax = Some(i);
            }
        }
        self.push(Matrix::scalar(best), Op::MaxAll { x, argmax })
    }

    /// Row lookup: output row t is `table[ids[t]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut v = Matrix::zeros(ids.len(), tv.cols());
        for (t, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(Error::Input(format!(
                    "row id {id} at index {t} out of range for table with {} rows",
                    tv.rows()
                )));
            }
            v.row_mut(t).copy_from_slice(tv.row(id));
        }
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `[a | b]` side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return shape_err("concat_cols", av.shape(), bv.shape());
        }
        let v = Matrix::from_fn(av.rows(), av.cols() + bv.cols(), |r, c| {
            if c < av.cols() {
                av.get(r, c)
            } else {
                bv.get(r, c - av.cols())
            }
        });
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    /// Per-row normalization over the columns with affine `gamma`, `beta` (n×1).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        if gv.shape() != (n, 1) {
            return shape_err("layernorm", xv.shape(), gv.shape());
        }
        if bv.shape() != (n, 1) {
            return shape_err("layernorm", xv.shape(), bv.shape());
        }
        let mut xhat = Matrix::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Matrix::zeros(xv.rows(), n);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Pairwise content gate: `out[t][s] = sigmoid(wᵀ tanh(P_t + Q_s) + b)`
    /// with `P`, `Q` of shape T×m, `w` m×1 and `b` 1×1.
    pub fn pair_gate(&mut self, p: Var, q: Var, w: Var, b: Var) -> Result<Var> {
        let (pv, qv, wv, bv) = (self.value(p), self.value(q), self.value(w), self.value(b));
        if pv.shape() != qv.shape() {
            return shape_err("pair_gate", pv.shape(), qv.shape());
        }
        let (t_len, m) = pv.shape();
        if wv.shape() != (m, 1) {
            return shape_err("pair_gate", pv.shape(), wv.shape());
        }
        if bv.shape() != (1, 1) {
            return shape_err("pair_gate", pv.shape(), bv.shape());
        }
        let bias = bv.item();
        let wd = wv.data();
        let mut hidden = if self.record {
            vec![0.0; t_len * t_len * m]
        } else {
            Vec::new()
        };
        let mut scratch = vec![0.0; m];
        let mut out = Matrix::zeros(t_len, t_len);
        for t in 0..t_len {
            let pt = pv.row(t);
            for s in 0..t_len {
                for ((h, a), c) in scratch.iter_mut().zip(pt).zip(qv.row(s)) {
                    *h = (a + c).tanh();
                }
                out.set(t, s, sigmoid(dot(wd, &scratch) + bias));
                if self.record {
                    let base = (t * t_len + s) * m;
                    hidden[base..base + m].copy_from_slice(&scratch);
                }
            }
        }
        Ok(self.push(out, Op::PairGate { p, q, w, b, hidden }))
    }

    /// `out[t][s] = exp(-(t-s)² / (2σ²))` with `σ = exp(log_sigma)`, T×T.
    pub fn gaussian_decay(&mut self, log_sigma: Var, t_len: usize) -> Result<Var> {
        let lv = self.value(log_sigma);
        if lv.shape() != (1, 1) {
            return shape_err("gaussian_decay", (t_len, t_len), lv.shape());
        }
        let sigma = lv.item().exp();
        let v = Matrix::from_fn(t_len, t_len, |t, s| {
            let d = t as f64 - s as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        });
        Ok(self.push(v, Op::GaussianDecay(log_sigma)))
    }

    /// Graph-Laplacian action `out_t = Σ_s W_ts (x_s − x_t)`, evaluated as
    /// differences so constant columns map to exact zeros.
    pub fn laplacian(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        if wv.rows() != wv.cols() || wv.cols() != xv.rows() {
            return shape_err("laplacian", wv.shape(), xv.shape());
        }
        let v = laplacian_apply(wv, xv);
        Ok(self.push(v, Op::Laplacian { w, x }))
    }

    /// `−log softmax(logits)[label]` for a C×1 column of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.cols() != 1 {
            return shape_err("cross_entropy", lv.shape(), (lv.rows(), 1));
        }
        if label >= lv.rows() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                lv.rows()
            )));
        }
        let probs = softmax(lv.data());
        let loss = -log_softmax_at(lv.data(), label);
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, label, probs }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Contract("backward on a forward-only tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut contributions = self.vjp(node, &g)?;
            if let Some(f) = self.fault {
                if f.op == node.op.kind() {
                    if let Some((_, m)) = contributions.get_mut(f.input) {
                        *m = m.scale(f.factor);
                    }
                }
            }
            for (parent, contrib) in contributions {
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn vjp(&self, node: &Node, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![(*a, g.matmul_nt(val(*b))?), (*b, val(*a).matmul_tn(g)?)],
            Op::MatMulNT(a, b) => vec![(*a, g.matmul(val(*b))?), (*b, g.matmul_tn(val(*a))?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.hadamard(val(*b))?), (*b, g.hadamard(val(*a))?)],
            Op::MulConst(x, c) => vec![(*x, g.hadamard(c)?)],
            Op::AddColBias(x, b) => {
                let mut db = Matrix::zeros(g.cols(), 1);
                for r in 0..g.rows() {
                    for (o, e) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *o += e;
                    }
                }
                vec![(*x, g.clone()), (*b, db)]
            }
            Op::ScaleBy(x, s) => {
                let sv = val(*s).item();
                let ds = dot(g.data(), val(*x).data());
                vec![(*x, g.scale(sv)), (*s, Matrix::scalar(ds))]
            }
            Op::DivBy(x, s) => {
                let sv = val(*s).item();
                let ds = -dot(g.data(), val(*x).data()) / (sv * sv);
                vec![(*x, g.map(|e| e / sv)), (*s, Matrix::scalar(ds))]
            }
            Op::Unary(f, x) => {
                let xv = val(*x);
                let dx = Matrix::from_vec(
                    xv.rows(),
                    xv.cols(),
                    xv.data()
                        .iter()
                        .zip(node.value.data())
                        .zip(g.data())
                        .map(|((&xi, &yi), &gi)| gi * f.derivative(xi, yi))
                        .collect(),
                )?;
                vec![(*x, dx)]
            }
            Op::RowSums(x) => {
                let xv = val(*x);
                vec![(*x, Matrix::from_fn(xv.rows(), xv.cols(), |r, _| g.get(r, 0)))]
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let t = xv.rows() as f64;
                vec![(*x, Matrix::from_fn(xv.rows(), xv.cols(), |_, c| g.get(c, 0) / t))]
            }
            Op::SumAll(x) => {
                let (r, c) = val(*x).shape();
                vec![(*x, Matrix::filled(r, c, g.item()))]
            }
            Op::MaxAll { x, argmax } => {
                let (r, c) = val(*x).shape();
                let mut dx = Matrix::zeros(r, c);
                if let Some(k) = argmax {
                    dx.data_mut()[*k] = g.item();
                }
                vec![(*x, dx)]
            }
            Op::Gather { table, ids } => {
                let (r, c) = val(*table).shape();
                let mut dt = Matrix::zeros(r, c);
                for (t, &id) in ids.iter().enumerate() {
                    for (o, e) in dt.row_mut(id).iter_mut().zip(g.row(t)) {
                        *o += e;
                    }
                }
                vec![(*table, dt)]
            }
            Op::ConcatCols(a, b) => {
                let ac = val(*a).cols();
                let bc = val(*b).cols();
                vec![
                    (*a, Matrix::from_fn(g.rows(), ac, |r, c| g.get(r, c))),
                    (*b, Matrix::from_fn(g.rows(), bc, |r, c| g.get(r, ac + c))),
                ]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma);
                let (rows, n) = xhat.shape();
                let mut dx = Matrix::zeros(rows, n);
                let mut dgamma = Matrix::zeros(n, 1);
                let mut dbeta = Matrix::zeros(n, 1);
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut dxhat = vec![0.0; n];
                    for c in 0..n {
                        dgamma.data_mut()[c] += gr[c] * hr[c];
                        dbeta.data_mut()[c] += gr[c];
                        dxhat[c] = gr[c] * gv.data()[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dh = dot(&dxhat, hr) / n as f64;
                    for c in 0..n {
                        dx.set(r, c, inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh));
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::PairGate { p, q, w, b, hidden } => {
                let (t_len, m) = val(*p).shape();
                let wd = val(*w).data();
                let mut dp = Matrix::zeros(t_len, m);
                let mut dq = Matrix::zeros(t_len, m);
                let mut dw = Matrix::zeros(m, 1);
                let mut db = 0.0;
                for t in 0..t_len {
                    for s in 0..t_len {
                        let gate = node.value.get(t, s);
                        let dz = g.get(t, s) * gate * (1.0 - gate);
                        if dz == 0.0 {
                            continue;
                        }
                        db += dz;
                        let base = (t * t_len + s) * m;
                        let hs = &hidden[base..base + m];
                        for j in 0..m {
                            dw.data_mut()[j] += dz * hs[j];
                            let dpre = dz * wd[j] * (1.0 - hs[j] * hs[j]);
                            dp.row_mut(t)[j] += dpre;
                            dq.row_mut(s)[j] += dpre;
                        }
                    }
                }
                vec![(*p, dp), (*q, dq), (*w, dw), (*b, Matrix::scalar(db))]
            }
            Op::GaussianDecay(log_sigma) => {
                let sigma = val(*log_sigma).item().exp();
                let mut ds = 0.0;
                let t_len = node.value.rows();
                for t in 0..t_len {
                    for s in 0..t_len {
                        let d = t as f64 - s as f64;
                        ds += g.get(t, s) * node.value.get(t, s) * d * d / (sigma * sigma);
                    }
                }
                vec![(*log_sigma, Matrix::scalar(ds))]
            }
            Op::Laplacian { w, x } => {
                let (wv, xv) = (val(*w), val(*x));
                let t_len = wv.rows();
                let mut dw = Matrix::zeros(t_len, t_len);
                for t in 0..t_len {
                    let gt = g.row(t);
                    let xt = xv.row(t);
                    for s in 0..t_len {
                        let diff: f64 = gt
                            .iter()
                            .zip(xv.row(s))
                            .zip(xt)
                            .map(|((gi, xs), xt)| gi * (xs - xt))
                            .sum();
                        dw.set(t, s, diff);
                    }
                }
                // dx = Wᵀg − diag(W1) g
                let mut dx = wv.matmul_tn(g)?;
                let sums = wv.row_sums();
                for t in 0..t_len {
                    let st = sums.get(t, 0);
                    for (o, gi) in dx.row_mut(t).iter_mut().zip(g.row(t)) {
                        *o -= st * gi;
                    }
                }
                vec![(*w, dw), (*x, dx)]
            }
            Op::CrossEntropy { logits, label, probs } => {
                let gs = g.item();
                let mut d = probs.clone();
                d[*label] -= 1.0;
                vec![(*logits, Matrix::column(&d).scale(gs))]
            }
        })
    }
}

/// `out_t = Σ_s W_ts (x_s − x_t)`.
pub fn laplacian_apply(w: &Matrix, x: &Matrix) -> Matrix {
    let (t_len, d) = x.shape();
    let mut out = Matrix::zeros(t_len, d);
    for t in 0..t_len {
        let xt = x.row(t).to_vec();
        let out_row = out.row_mut(t);
        for s in 0..t_len {
            let wts = w.get(t, s);
            if wts == 0.0 {
                continue;
            }
            for ((o, xs), xt) in out_row.iter_mut().zip(x.row(s)).zip(&xt) {
                *o += wts * (xs - xt);
            }
        }
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[k] - max - lse
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
