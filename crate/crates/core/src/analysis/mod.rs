//! Executable checks for the two structural guarantees of a diffusion layer:
//!
//! - stability: with `δt · max_t Σ_s W_ts ≤ 1` each explicit step replaces a
//!   token by a convex combination of tokens, so per-feature envelopes over
//!   tokens can only shrink;
//! - global dependency: if the kernel graph is strongly connected, some power
//!   of the effective operator `A = I + δt (W − diag(W·1))` is entrywise
//!   positive, i.e. after that many layers every output depends on every input.
//!
//! Plus an end-to-end finite-difference gradient checker for the model.

mod gradcheck;

use serde::Serialize;

pub use gradcheck::{grad_check, grad_check_with_fault, relative_error, GradCheckReport, TensorCheck};

use crate::error::{Error, Result};
use crate::kernels::KernelOutput;
use crate::layer::diffusion_step;
use crate::tensor::Matrix;

/// Entries at or below this are treated as zero when testing positivity.
pub const POSITIVITY_THRESHOLD: f64 = 1e-300;
/// Below this maximum magnitude a power is flagged as underflowing.
pub const UNDERFLOW_FLAG: f64 = 1e-250;
pub const ENVELOPE_TOLERANCE: f64 = 1e-12;

/// `A = I + δt (W − diag(W·1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveOperator {
    pub a: Matrix,
}

impl EffectiveOperator {
    pub fn len(&self) -> usize {
        self.a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.rows() == 0
    }

    /// Largest deviation of any row sum from 1.
    pub fn row_stochastic_error(&self) -> f64 {
        (0..self.a.rows())
            .map(|t| (self.a.row(t).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Builds the effective operator of one explicit diffusion step. Fails if a
/// diagonal entry would be negative, which only happens outside the stable
/// regime.
pub fn effective_operator(ker: &KernelOutput) -> Result<EffectiveOperator> {
    let n = ker.len();
    let dt = ker.delta_t_eff;
    let mut a = ker.weights.scale(dt);
    for t in 0..n {
        let diag = 1.0 - dt * ker.row_sums[t];
        if diag < 0.0 {
            return Err(Error::Contract(format!(
                "effective operator diagonal {t} is {diag} < 0: δt = {dt}, row sum = {}",
                ker.row_sums[t]
            )));
        }
        a.set(t, t, diag);
    }
    Ok(EffectiveOperator { a })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Dependency {
    /// `A^power` is the first entrywise positive power.
    Reached { power: usize },
    /// No power up to `l_max` is entrywise positive.
    NotWithin { l_max: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DependencyReport {
    pub outcome: Dependency,
    /// Smallest entry of the last power computed.
    pub min_entry: f64,
    /// The last power's largest entry fell below the underflow flag, so a
    /// negative answer may be an artefact of 64-bit range.
    pub underflow: bool,
    /// Number of exactly-zero entries strictly above the diagonal in the last power.
    pub upper_zeros: usize,
    /// When a positive power was found, whether the next power is positive too.
    pub next_positive: Option<bool>,
}

impl DependencyReport {
    pub fn power(&self) -> Option<usize> {
        match self.outcome {
            Dependency::Reached { power } => Some(power),
            Dependency::NotWithin { .. } => None,
        }
    }
}

/// Smallest `L ≤ l_max` with `A^L` entrywise positive, by repeated multiplication.
pub fn global_dependency_l(op: &EffectiveOperator, l_max: usize) -> Result<DependencyReport> {
    if l_max == 0 {
        return Err(Error::Contract("l_max must be at least 1".into()));
    }
    let mut power = op.a.clone();
    let summarize = |p: &Matrix, outcome: Dependency| {
        let n = p.rows();
        let upper_zeros = (0..n)
            .flat_map(|t| (t + 1..n).map(move |s| (t, s)))
            .filter(|&(t, s)| p.get(t, s) == 0.0)
            .count();
        DependencyReport {
            outcome,
            min_entry: p.data().iter().cloned().fold(f64::INFINITY, f64::min),
            underflow: p.max_abs() < UNDERFLOW_FLAG,
            upper_zeros,
            next_positive: None,
        }
    };
    let positive = |p: &Matrix| p.data().iter().all(|&v| v > POSITIVITY_THRESHOLD);
    for k in 1..=l_max {
        if positive(&power) {
            let mut report = summarize(&power, Dependency::Reached { power: k });
            report.next_positive = Some(positive(&power.matmul(&op.a)?));
            return Ok(report);
        }
        if k < l_max {
            power = power.matmul(&op.a)?;
        }
    }
    Ok(summarize(&power, Dependency::NotWithin { l_max }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    /// `min_t 1 / Σ_s W_ts` over rows with positive sum; `None` stands for +∞.
    pub bound: Option<f64>,
    pub delta_t_eff: f64,
    pub satisfied: bool,
}

pub fn check_stability_bound(ker: &KernelOutput) -> StabilityReport {
    let bound = ker
        .row_sums
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|s| 1.0 / s)
        .fold(None, |acc: Option<f64>, b| Some(acc.map_or(b, |a| a.min(b))));
    StabilityReport {
        bound,
        delta_t_eff: ker.delta_t_eff,
        satisfied: bound.is_none_or(|b| ker.delta_t_eff <= b),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeViolation {
    pub iteration: usize,
    pub column: usize,
    /// How far the envelope moved outward.
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeReport {
    /// Per iteration (0 = initial state), per column: max over tokens.
    pub max_trace: Vec<Vec<f64>>,
    /// Per iteration, per column: min over tokens.
    pub min_trace: Vec<Vec<f64>>,
    /// Frobenius norm ratio `‖H_k‖ / ‖H_{k−1}‖` for k ≥ 1. Logged, not asserted.
    pub l2_ratio: Vec<f64>,
    pub violation: Option<EnvelopeViolation>,
}

impl EnvelopeReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }

    /// Largest `max − min` spread over columns after the final iteration.
    pub fn final_gap(&self) -> f64 {
        let (Some(hi), Some(lo)) = (self.max_trace.last(), self.min_trace.last()) else {
            return 0.0;
        };
        hi.iter().zip(lo).map(|(a, b)| a - b).fold(0.0, f64::max)
    }
}

fn column_extremes(h: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mut hi = vec![f64::NEG_INFINITY; h.cols()];
    let mut lo = vec![f64::INFINITY; h.cols()];
    for t in 0..h.rows() {
        for (c, &v) in h.row(t).iter().enumerate() {
            hi[c] = hi[c].max(v);
            lo[c] = lo[c].min(v);
        }
    }
    (hi, lo)
}

fn frobenius(h: &Matrix) -> f64 {
    h.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Iterates `H ← H + diffusion_step(H, ker)` and checks, per feature column,
/// that the max over tokens never increases and the min never decreases.
/// Stops at the first violation.
pub fn envelope_contraction_test(h0: &Matrix, ker: &KernelOutput, iters: usize) -> Result<EnvelopeReport> {
    let stability = check_stability_bound(ker);
    if !stability.satisfied {
        return Err(Error::Contract(format!(
            "envelope test needs a stable kernel: δt = {} exceeds bound {:?}",
            stability.delta_t_eff, stability.bound
        )));
    }
    let mut h = h0.clone();
    let (hi, lo) = column_extremes(&h);
    let mut report = EnvelopeReport {
        max_trace: vec![hi],
        min_trace: vec![lo],
        l2_ratio: Vec::new(),
        violation: None,
    };
    for it in 1..=iters {
        let next = h.add(&diffusion_step(&h, ker)?)?;
        let (hi, lo) = column_extremes(&next);
        let prev_hi = report.max_trace.last().unwrap();
        let prev_lo = report.min_trace.last().unwrap();
        for c in 0..hi.len() {
            let up = hi[c] - prev_hi[c];
            let down = prev_lo[c] - lo[c];
            let worst = up.max(down);
            if worst > ENVELOPE_TOLERANCE {
                report.violation = Some(EnvelopeViolation {
                    iteration: it,
                    column: c,
                    magnitude: worst,
                });
                break;
            }
        }
        let before = frobenius(&h);
        report
            .l2_ratio
            .push(if before > 0.0 { frobenius(&next) / before } else { 1.0 });
        report.max_trace.push(hi);
        report.min_trace.push(lo);
        h = next;
        if report.violation.is_some() {
            break;
        }
    }
    Ok(report)
}
