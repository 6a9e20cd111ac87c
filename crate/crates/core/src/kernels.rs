//! Content-gated diffusion kernels.
//!
//! A kernel is stored as a nonnegative weight matrix `W` with a zero
//! diagonal. The Laplacian form used by the diffusion update is
//! `W − diag(W·1)`, whose rows sum to zero. Raw pair weights are
//!
//! ```text
//! ŵ_ts = mask(t, s) · softplus(decay(|t − s|) · gate(h_t, h_s))
//! ```
//!
//! and `W = ŵ / max_t Σ_s ŵ_ts`, so the largest row sum is one. Together with
//! a rate `δt = sigmoid(rho) ∈ (0, 1)` this keeps every explicit step inside
//! the stable regime `δt · max_t Σ_s W_ts < 1`.
//!
//! The same code builds both the diffusion kernel and the attention kernel;
//! the two only differ in their parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{rate, sigmoid, Matrix, SeededRng, Tape, Var};

/// Lower bound on the normalizer so fully masked kernels stay finite.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    Bidirectional,
    Causal,
}

/// One-hidden-layer gate `sigmoid(wᵀ tanh(U h_t + V h_s) + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiMlp {
    pub u: Matrix,
    pub v: Matrix,
    pub w: Matrix,
    pub b: f64,
}

impl PsiMlp {
    pub fn hidden(&self) -> usize {
        self.u.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.u.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    /// Raw rate; the effective step is `sigmoid(rho)`.
    pub rho: f64,
    /// `σ_g = exp(log_sigma_g)`, in time steps.
    pub log_sigma_g: f64,
    pub psi: PsiMlp,
    pub mask_mode: MaskMode,
}

pub const INIT_RHO: f64 = -2.0;
pub const INIT_STDDEV: f64 = 0.02;

impl KernelParams {
    /// Default initialization: normal(0, 0.02) gate weights, zero gate bias,
    /// `rho = -2` and `σ_g = 4`.
    pub fn init(rng: &mut SeededRng, d: usize, hidden: usize, mask_mode: MaskMode) -> Self {
        Self {
            rho: INIT_RHO,
            log_sigma_g: 4f64.ln(),
            psi: PsiMlp {
                u: rng.normal_matrix(hidden, d, INIT_STDDEV),
                v: rng.normal_matrix(hidden, d, INIT_STDDEV),
                w: rng.normal_matrix(hidden, 1, INIT_STDDEV),
                b: 0.0,
            },
            mask_mode,
        }
    }

    pub fn sigma_g(&self) -> f64 {
        self.log_sigma_g.exp()
    }

    pub fn delta_t_eff(&self) -> f64 {
        rate(self.rho)
    }
}

/// A realized kernel: weights, their row sums and the effective step.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelOutput {
    pub weights: Matrix,
    pub row_sums: Vec<f64>,
    pub delta_t_eff: f64,
}

impl KernelOutput {
    /// Wraps a hand-built weight matrix. The matrix must be square, finite,
    /// zero on the diagonal and nonnegative elsewhere.
    pub fn from_weights(weights: Matrix, delta_t_eff: f64) -> Result<Self> {
        if weights.rows() != weights.cols() {
            return Err(Error::Contract(format!(
                "kernel weights must be square, got {:?}",
                weights.shape()
            )));
        }
        if !weights.is_finite() || !delta_t_eff.is_finite() {
            return Err(Error::Contract("kernel weights must be finite".into()));
        }
        for t in 0..weights.rows() {
            for s in 0..weights.cols() {
                let v = weights.get(t, s);
                if (t == s && v != 0.0) || v < 0.0 {
                    return Err(Error::Contract(format!(
                        "kernel entry ({t}, {s}) = {v} violates zero diagonal / nonnegativity"
                    )));
                }
            }
        }
        let row_sums = (0..weights.rows()).map(|t| weights.row(t).iter().sum()).collect();
        Ok(Self {
            weights,
            row_sums,
            delta_t_eff,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.rows() == 0
    }

    pub fn max_row_sum(&self) -> f64 {
        self.row_sums.iter().cloned().fold(0.0, f64::max)
    }

    /// `W − diag(row_sums)`.
    pub fn laplacian(&self) -> Matrix {
        let mut l = self.weights.clone();
        for (t, s) in self.row_sums.iter().enumerate() {
            l.set(t, t, l.get(t, t) - s);
        }
        l
    }
}

/// Directional mask φ: 1 when `s` may send to `t`. The diagonal is always 0.
pub fn temporal_mask(mode: MaskMode, t: usize, s: usize) -> f64 {
    let open = match mode {
        MaskMode::Bidirectional => t != s,
        MaskMode::Causal => s < t,
    };
    if open {
        1.0
    } else {
        0.0
    }
}

pub fn mask_matrix(mode: MaskMode, t_len: usize) -> Matrix {
    Matrix::from_fn(t_len, t_len, |t, s| temporal_mask(mode, t, s))
}

/// Gaussian decay `exp(−δ² / 2σ²)`.
pub fn distance_decay(delta: f64, sigma_g: f64) -> f64 {
    (-(delta * delta) / (2.0 * sigma_g * sigma_g)).exp()
}

/// Content gate ψ for one pair of d×1 hidden states.
pub fn content_gate(h_t: &Matrix, h_s: &Matrix, psi: &PsiMlp) -> Result<f64> {
    let a = psi.u.matmul(h_t)?;
    let b = psi.v.matmul(h_s)?;
    let hidden = a.add(&b)?.map(f64::tanh);
    if psi.w.shape() != (hidden.rows(), 1) {
        return crate::error::shape_err("content_gate", hidden.shape(), psi.w.shape());
    }
    let z: f64 = hidden.data().iter().zip(psi.w.data()).map(|(h, w)| h * w).sum();
    Ok(sigmoid(z + psi.b))
}

/// Tape handles for one kernel's parameters.
#[derive(Clone, Copy, Debug)]
pub struct KernelVars {
    pub rho: Var,
    pub log_sigma_g: Var,
    pub u: Var,
    pub v: Var,
    pub w: Var,
    pub b: Var,
    pub mode: MaskMode,
}

impl KernelVars {
    pub fn register(tape: &mut Tape, p: &KernelParams) -> Self {
        Self {
            mode: p.mask_mode,
            rho: tape.leaf(Matrix::scalar(p.rho)),
            log_sigma_g: tape.leaf(Matrix::scalar(p.log_sigma_g)),
            u: tape.leaf(p.psi.u.clone()),
            v: tape.leaf(p.psi.v.clone()),
            w: tape.leaf(p.psi.w.clone()),
            b: tape.leaf(Matrix::scalar(p.psi.b)),
        }
    }
}

/// Kernel quantities recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct KernelNodes {
    /// Normalized T×T weights.
    pub weights: Var,
    /// T×1 row sums of `weights`.
    pub row_sums: Var,
    /// 1×1 effective step.
    pub delta_t: Var,
}

/// Records kernel construction from hidden states `h` (T×d).
pub fn kernel_on_tape(tape: &mut Tape, h: Var, vars: &KernelVars) -> Result<KernelNodes> {
    if !tape.value(h).is_finite() {
        return Err(Error::Contract("kernel input contains non-finite values".into()));
    }
    let t_len = tape.shape(h).0;
    if t_len == 0 {
        return Err(Error::Contract("kernel needs at least one token".into()));
    }
    let p = tape.matmul_nt(h, vars.u)?;
    let q = tape.matmul_nt(h, vars.v)?;
    let gate = tape.pair_gate(p, q, vars.w, vars.b)?;
    let decay = tape.gaussian_decay(vars.log_sigma_g, t_len)?;
    let raw = tape.mul(decay, gate)?;
    let soft = tape.softplus(raw);
    // masking after softplus keeps blocked pairs at exactly zero
    let masked = tape.mul_const(soft, mask_matrix(vars.mode, t_len))?;
    let sums = tape.row_sums(masked);
    let norm = tape.max_all(sums, NORM_FLOOR);
    let weights = tape.div_by(masked, norm)?;
    let row_sums = tape.div_by(sums, norm)?;
    let delta_t = tape.rate(vars.rho);
    Ok(KernelNodes {
        weights,
        row_sums,
        delta_t,
    })
}

impl KernelNodes {
    pub fn realize(&self, tape: &Tape) -> KernelOutput {
        KernelOutput {
            weights: tape.value(self.weights).clone(),
            row_sums: tape.value(self.row_sums).data().to_vec(),
            delta_t_eff: tape.value(self.delta_t).item(),
        }
    }
}

/// Builds the kernel for hidden states `h` (T×d) outside any training tape.
pub fn build_kernel(h: &Matrix, params: &KernelParams) -> Result<KernelOutput> {
    let mut tape = Tape::no_grad();
    let hv = tape.leaf(h.clone());
    let vars = KernelVars::register(&mut tape, params);
    let nodes = kernel_on_tape(&mut tape, hv, &vars)?;
    Ok(nodes.realize(&tape))
}
