use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{loss_and_grad, loss_value, ModelConfig, ModelParams};
use crate::tensor::{Fault, SeededRng};

/// Tensors with more entries than this are subsampled.
const FULL_CHECK_LIMIT: usize = 256;
const SUBSAMPLE: usize = 64;
/// Spread of the random offset added to every parameter so the check runs at
/// a generic point rather than at the near-symmetric initialization.
const PERTURB_STDDEV: f64 = 0.3;
/// The gate output weights get a wider spread and `rho` is shifted up so the
/// kernel parameters see gradients well above the central-difference noise
/// floor (about one ulp of the loss over 2ε, ~1e-11).
const GATE_PERTURB_STDDEV: f64 = 1.0;
const RHO_SHIFT: f64 = 3.0;

fn perturbation(name: &str) -> (f64, f64) {
    if name.ends_with("rho") {
        (RHO_SHIFT, PERTURB_STDDEV)
    } else if name.ends_with("psi.w") || name.ends_with("psi.b") {
        (0.0, GATE_PERTURB_STDDEV)
    } else {
        (0.0, PERTURB_STDDEV)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Row-major index of the worst entry, with its analytic and numeric gradients.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backpropagated gradients against central differences for every
/// parameter tensor of a freshly initialized, randomly perturbed model on one
/// random sequence of length `seq_len`.
pub fn grad_check(config: &ModelConfig, seq_len: usize, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    grad_check_with_fault(config, seq_len, seed, eps, tol, None)
}

/// [`grad_check`] with a deliberately corrupted backward rule.
pub fn grad_check_with_fault(
    config: &ModelConfig,
    seq_len: usize,
    seed: u64,
    eps: f64,
    tol: f64,
    fault: Option<Fault>,
) -> Result<GradCheckReport> {
    if seq_len == 0 || seq_len > config.t_max {
        return Err(Error::Config(format!(
            "gradcheck sequence length {seq_len} out of range"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut params = ModelParams::init(config)?;
    params.update_each(|_, name, m| {
        let (offset, sd) = perturbation(name);
        for v in m.data_mut() {
            *v += offset + sd * rng.normal();
        }
        Ok(())
    })?;
    let tokens: Vec<usize> = (0..seq_len).map(|_| rng.below(config.vocab_size)).collect();
    let label = rng.below(config.num_classes);

    let (loss, grads) = loss_and_grad(&tokens, label, &params, config, fault)?;
    let named = params.named_tensors();
    let mut tensors = Vec::with_capacity(named.len());
    for ((name, m), grad) in named.iter().zip(&grads) {
        let indices: Vec<usize> = if m.len() <= FULL_CHECK_LIMIT {
            (0..m.len()).collect()
        } else {
            let mut picked: Vec<usize> = (0..SUBSAMPLE).map(|_| rng.below(m.len())).collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        let numeric: Vec<f64> = indices
            .par_iter()
            .map(|&i| {
                let x = m.data()[i];
                let plus = loss_value(&tokens, label, &params.with_entry(name, i, x + eps)?, config)?;
                let minus = loss_value(&tokens, label, &params.with_entry(name, i, x - eps)?, config)?;
                Ok((plus - minus) / (2.0 * eps))
            })
            .collect::<Result<_>>()?;
        let mut check = TensorCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_err: -1.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            passed: true,
        };
        for (&i, &fd) in indices.iter().zip(&numeric) {
            let ad = grad.data()[i];
            let err = relative_error(ad, fd);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
                check.worst_analytic = ad;
                check.worst_numeric = fd;
            }
        }
        check.max_rel_err = check.max_rel_err.max(0.0);
        check.passed = check.max_rel_err <= tol;
        tensors.push(check);
    }
    Ok(GradCheckReport {
        eps,
        tol,
        loss,
        tensors,
    })
}
