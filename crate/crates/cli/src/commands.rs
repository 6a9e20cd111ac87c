use std::io::Write;
use std::path::Path;

use ldn_core::analysis::{
    check_stability_bound, effective_operator, envelope_contraction_test, global_dependency_l, grad_check, Dependency,
};
use ldn_core::kernels::{KernelOutput, MaskMode};
use ldn_core::layer::{layer_forward, layer_kernels};
use ldn_core::model::{encode_input, ModelParams};
use ldn_core::training::{
    accuracy, check_compatible, eval_batch, load_model_checkpoint, save_checkpoint, train, TaskBatch, EVAL_SAMPLES,
};
use ldn_core::{Matrix, SeededRng};
use serde_json::{json, Value};

use crate::{CliConfig, CliError};

/// Fresh samples scored by `eval`.
pub const EVAL_REPORT_SAMPLES: usize = 2048;
/// Iterations of pure diffusion in the envelope check.
pub const VERIFY_ENVELOPE_ITERS: usize = 50;
/// Largest model the gradient checker accepts.
pub const GRADCHECK_MAX_T: usize = 8;
pub const GRADCHECK_MAX_D: usize = 8;

/// Trains, streaming one JSON line per metrics record to `metrics`, and
/// writes the final checkpoint when a path is given.
pub fn cmd_train(cfg: &CliConfig, metrics: &mut dyn Write, ckpt: Option<&Path>) -> Result<Value, CliError> {
    let mut write_err = None;
    let outcome = train(&cfg.model, &cfg.train, |rec| {
        if write_err.is_none() {
            let line = serde_json::to_string(rec).expect("metrics serialize");
            if let Err(e) = writeln!(metrics, "{line}") {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    metrics.flush()?;
    if let Some(path) = ckpt {
        save_checkpoint(path, &outcome.checkpoint)?;
    }
    let last = outcome.log.last().expect("training always logs at least one record");
    Ok(json!({
        "steps": cfg.train.steps,
        "final_loss": last.loss,
        "final_accuracy": last.accuracy,
        "checkpoint": ckpt.map(|p| p.display().to_string()),
    }))
}

/// Scores a checkpoint on fresh samples from the evaluation seed. The
/// `heldout_accuracy` field covers the first 512 of them, which is exactly the
/// set scored during training.
pub fn cmd_eval(cfg: &CliConfig, ckpt: &Path) -> Result<Value, CliError> {
    check_compatible(&cfg.model, &cfg.train)?;
    let (params, step) = load_model_checkpoint(ckpt, &cfg.model)?;
    let batch = eval_batch(&cfg.train, EVAL_REPORT_SAMPLES)?;
    let held = TaskBatch {
        sequences: batch.sequences[..EVAL_SAMPLES].to_vec(),
        labels: batch.labels[..EVAL_SAMPLES].to_vec(),
    };
    Ok(json!({
        "task": cfg.train.task.name(),
        "T": cfg.train.seq_len,
        "step": step,
        "samples": EVAL_REPORT_SAMPLES,
        "accuracy": accuracy(&batch, &params, &cfg.model)?,
        "heldout_samples": EVAL_SAMPLES,
        "heldout_accuracy": accuracy(&held, &params, &cfg.model)?,
    }))
}

/// Nearest-neighbour path graph on `t_len` tokens, normalized to max row sum 1.
pub fn path_kernel(t_len: usize, delta_t: f64) -> Result<KernelOutput, CliError> {
    let w = Matrix::from_fn(t_len, t_len, |t, s| if t.abs_diff(s) == 1 { 0.5 } else { 0.0 });
    Ok(KernelOutput::from_weights(w, delta_t)?)
}

/// Stability, dependency and envelope checks on one kernel. In causal mode a
/// missing global dependency is expected and only reported.
fn kernel_checks(
    label: &str,
    ker: &KernelOutput,
    h: &Matrix,
    mode: MaskMode,
    expect_power: Option<usize>,
) -> Result<Vec<Value>, CliError> {
    let t_len = ker.len();
    let mut out = Vec::new();

    let stab = check_stability_bound(ker);
    out.push(json!({
        "check": format!("{label}.stability"),
        "pass": stab.satisfied,
        "bound": stab.bound,
        "delta_t_eff": stab.delta_t_eff,
        "max_row_sum": ker.max_row_sum(),
    }));

    let op = effective_operator(ker)?;
    let err = op.row_stochastic_error();
    out.push(json!({
        "check": format!("{label}.row_stochastic"),
        "pass": err <= 1e-9,
        "max_row_sum_error": err,
    }));

    let l_max = 2 * t_len;
    let dep = global_dependency_l(&op, l_max)?;
    let mut entry = json!({
        "check": format!("{label}.global_dependency"),
        "l_max": l_max,
        "outcome": dep.outcome,
        "min_entry": dep.min_entry,
        "underflow": dep.underflow,
        "upper_zeros": dep.upper_zeros,
    });
    let pass = match (mode, &dep.outcome) {
        (MaskMode::Causal, Dependency::NotWithin { .. }) => {
            entry["informational"] = json!(true);
            dep.upper_zeros == t_len * (t_len - 1) / 2
        }
        (MaskMode::Causal, Dependency::Reached { .. }) => t_len == 1,
        (MaskMode::Bidirectional, Dependency::Reached { power }) => {
            entry["next_power_positive"] = json!(dep.next_positive);
            dep.next_positive == Some(true) && expect_power.is_none_or(|p| p == *power)
        }
        (MaskMode::Bidirectional, Dependency::NotWithin { .. }) => false,
    };
    entry["pass"] = json!(pass);
    if let Some(p) = expect_power {
        entry["expected_power"] = json!(p);
    }
    out.push(entry);

    if h.rows() == t_len {
        let env = envelope_contraction_test(h, ker, VERIFY_ENVELOPE_ITERS)?;
        out.push(json!({
            "check": format!("{label}.envelope"),
            "pass": env.passed(),
            "iterations": VERIFY_ENVELOPE_ITERS,
            "final_gap": env.final_gap(),
            "violation": env.violation,
            "max_l2_ratio": env.l2_ratio.iter().cloned().fold(0.0, f64::max),
        }));
    }
    Ok(out)
}

/// Runs the structural checks on every kernel of a randomly initialized model
/// (layer norm disabled) on a random input, plus a path-graph fixture.
pub fn cmd_verify(cfg: &CliConfig) -> Result<(Value, bool), CliError> {
    let mut model = cfg.model.clone();
    model.use_norm = false;
    check_compatible(&model, &cfg.train)?;
    let t_len = cfg.train.seq_len;
    let params = ModelParams::init(&model)?;
    let mut rng = SeededRng::new(cfg.train.seed);
    let tokens: Vec<usize> = (0..t_len).map(|_| rng.below(model.vocab_size)).collect();
    let (mut h, e) = encode_input(&tokens, &params, &model)?;

    let mut checks = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        let (diff, attn) = layer_kernels(&h, layer, false)?;
        checks.extend(kernel_checks(
            &format!("layer{i}.diff"),
            &diff,
            &h,
            model.mask_mode,
            None,
        )?);
        checks.extend(kernel_checks(
            &format!("layer{i}.attn"),
            &attn,
            &h,
            model.mask_mode,
            None,
        )?);
        h = layer_forward(&h, &e, layer, false)?;
    }
    let path = path_kernel(4, 0.5)?;
    checks.extend(kernel_checks(
        "path_fixture",
        &path,
        &Matrix::zeros(0, 0),
        MaskMode::Bidirectional,
        Some(3),
    )?);

    let pass = checks.iter().all(|c| c["pass"] == json!(true));
    Ok((
        json!({
            "mask_mode": model.mask_mode,
            "T": t_len,
            "layers": model.layers,
            "pass": pass,
            "checks": checks,
        }),
        pass,
    ))
}

/// Finite-difference check of every parameter tensor at `T = train.T`.
pub fn cmd_gradcheck(cfg: &CliConfig, eps: f64, tol: f64) -> Result<(Value, bool), CliError> {
    cfg.model.validate()?;
    let t_len = cfg.train.seq_len;
    if t_len > GRADCHECK_MAX_T || cfg.model.d > GRADCHECK_MAX_D {
        return Err(CliError::Input(format!(
            "gradcheck needs a small model: T ≤ {GRADCHECK_MAX_T} and d ≤ {GRADCHECK_MAX_D}, got T = {t_len}, d = {}",
            cfg.model.d
        )));
    }
    if !(eps > 0.0 && tol > 0.0) {
        return Err(CliError::Input("gradcheck eps and tol must be positive".into()));
    }
    let report = grad_check(&cfg.model, t_len, cfg.model.seed, eps, tol)?;
    let pass = report.passed();
    let failures: Vec<Value> = report
        .failures()
        .iter()
        .map(|f| {
            json!({
                "tensor": f.name,
                "index": f.worst_index,
                "analytic": f.worst_analytic,
                "numeric": f.worst_numeric,
                "rel_err": f.max_rel_err,
            })
        })
        .collect();
    Ok((
        json!({
            "check": "gradcheck",
            "pass": pass,
            "eps": report.eps,
            "tol": report.tol,
            "loss": report.loss,
            "tensors": report.tensors,
            "failures": failures,
        }),
        pass,
    ))
}
