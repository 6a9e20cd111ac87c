//! One diffusion layer.
//!
//! ```text
//! Z     = use_norm ? layernorm(H) : H
//! H_out = H + δt·L_K(Z) Z + F(E, Z) + δt_att·L_D(Z) Z
//! ```
//!
//! where `L_K`, `L_D` are the Laplacians of the two kernels built from `Z`
//! and `F` is the gated local update. The residual path always carries the
//! raw `H`.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{kernel_on_tape, KernelNodes, KernelOutput, KernelParams, KernelVars, MaskMode};
use crate::tensor::{laplacian_apply, Matrix, SeededRng, Tape, Var};

const INIT_STDDEV: f64 = 0.02;

/// `F(e, h) = sigmoid(W1 [h; e] + b1) ⊙ (W2 h + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdateParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl LocalUpdateParams {
    pub fn init(rng: &mut SeededRng, d: usize) -> Self {
        Self {
            w1: rng.normal_matrix(d, 2 * d, INIT_STDDEV),
            b1: Matrix::zeros(d, 1),
            w2: rng.normal_matrix(d, d, INIT_STDDEV),
            b2: Matrix::zeros(d, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl NormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Matrix::filled(d, 1, 1.0),
            beta: Matrix::zeros(d, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub diff_kernel: KernelParams,
    pub attn_kernel: KernelParams,
    pub local: LocalUpdateParams,
    pub norm: Option<NormParams>,
}

impl LayerParams {
    pub fn init(rng: &mut SeededRng, d: usize, psi_hidden: usize, mode: MaskMode, use_norm: bool) -> Self {
        Self {
            diff_kernel: KernelParams::init(rng, d, psi_hidden, mode),
            attn_kernel: KernelParams::init(rng, d, psi_hidden, mode),
            local: LocalUpdateParams::init(rng, d),
            norm: use_norm.then(|| NormParams::identity(d)),
        }
    }
}

/// `δt · Σ_s W_ts (h_s − h_t)` for every row.
pub fn diffusion_step(h: &Matrix, ker: &KernelOutput) -> Result<Matrix> {
    if ker.len() != h.rows() {
        return shape_err("diffusion_step", ker.weights.shape(), h.shape());
    }
    Ok(laplacian_apply(&ker.weights, h).scale(ker.delta_t_eff))
}

/// Content-sensitive diffusion with the attention kernel. Same update rule as
/// [`diffusion_step`]; only the kernel differs.
pub fn attention_diffusion(h: &Matrix, attn_ker: &KernelOutput) -> Result<Matrix> {
    diffusion_step(h, attn_ker)
}

pub fn local_update(e: &Matrix, h: &Matrix, p: &LocalUpdateParams) -> Result<Matrix> {
    let mut tape = Tape::no_grad();
    let (ev, hv) = (tape.leaf(e.clone()), tape.leaf(h.clone()));
    let vars = LocalVars::register(&mut tape, p);
    let out = local_on_tape(&mut tape, ev, hv, &vars)?;
    Ok(tape.value(out).clone())
}

pub fn layernorm(h: &Matrix, gamma: &Matrix, beta: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::no_grad();
    let hv = tape.leaf(h.clone());
    let g = tape.leaf(gamma.clone());
    let b = tape.leaf(beta.clone());
    let out = tape.layernorm(hv, g, b)?;
    Ok(tape.value(out).clone())
}

pub fn layer_forward(h_in: &Matrix, e: &Matrix, p: &LayerParams, use_norm: bool) -> Result<Matrix> {
    let mut tape = Tape::no_grad();
    let hv = tape.leaf(h_in.clone());
    let ev = tape.leaf(e.clone());
    let vars = LayerVars::register(&mut tape, p);
    let nodes = layer_on_tape(&mut tape, hv, ev, &vars, use_norm)?;
    Ok(tape.value(nodes.output).clone())
}

/// Kernels realized for a layer input, for inspection and analysis.
pub fn layer_kernels(h_in: &Matrix, p: &LayerParams, use_norm: bool) -> Result<(KernelOutput, KernelOutput)> {
    let mut tape = Tape::no_grad();
    let hv = tape.leaf(h_in.clone());
    let ev = tape.leaf(Matrix::zeros(h_in.rows(), h_in.cols()));
    let vars = LayerVars::register(&mut tape, p);
    let nodes = layer_on_tape(&mut tape, hv, ev, &vars, use_norm)?;
    Ok((nodes.diff_kernel.realize(&tape), nodes.attn_kernel.realize(&tape)))
}

#[derive(Clone, Copy, Debug)]
pub struct LocalVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl LocalVars {
    pub fn register(tape: &mut Tape, p: &LocalUpdateParams) -> Self {
        Self {
            w1: tape.leaf(p.w1.clone()),
            b1: tape.leaf(p.b1.clone()),
            w2: tape.leaf(p.w2.clone()),
            b2: tape.leaf(p.b2.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub diff: KernelVars,
    pub attn: KernelVars,
    pub local: LocalVars,
    pub norm: Option<(Var, Var)>,
}

impl LayerVars {
    /// Registers leaves in the canonical parameter order: diffusion kernel,
    /// attention kernel, local update, then optional norm.
    pub fn register(tape: &mut Tape, p: &LayerParams) -> Self {
        let diff = KernelVars::register(tape, &p.diff_kernel);
        let attn = KernelVars::register(tape, &p.attn_kernel);
        let local = LocalVars::register(tape, &p.local);
        let norm = p
            .norm
            .as_ref()
            .map(|n| (tape.leaf(n.gamma.clone()), tape.leaf(n.beta.clone())));
        Self {
            diff,
            attn,
            local,
            norm,
        }
    }
}

pub fn local_on_tape(tape: &mut Tape, e: Var, h: Var, vars: &LocalVars) -> Result<Var> {
    if tape.shape(e) != tape.shape(h) {
        return shape_err("local_update", tape.shape(e), tape.shape(h));
    }
    let joined = tape.concat_cols(h, e)?;
    let pre = tape.matmul_nt(joined, vars.w1)?;
    let pre = tape.add_col_bias(pre, vars.b1)?;
    let gate = tape.sigmoid(pre);
    let lin = tape.matmul_nt(h, vars.w2)?;
    let lin = tape.add_col_bias(lin, vars.b2)?;
    tape.mul(gate, lin)
}

pub fn diffusion_on_tape(tape: &mut Tape, h: Var, ker: &KernelNodes) -> Result<Var> {
    let lap = tape.laplacian(ker.weights, h)?;
    tape.scale_by(lap, ker.delta_t)
}

pub struct LayerNodes {
    pub output: Var,
    pub diff_kernel: KernelNodes,
    pub attn_kernel: KernelNodes,
}

pub fn layer_on_tape(tape: &mut Tape, h_in: Var, e: Var, vars: &LayerVars, use_norm: bool) -> Result<LayerNodes> {
    if tape.shape(h_in) != tape.shape(e) {
        return shape_err("layer_forward", tape.shape(h_in), tape.shape(e));
    }
    let z = if use_norm {
        let (gamma, beta) = vars
            .norm
            .ok_or_else(|| Error::Config("use_norm set but layer has no norm parameters".into()))?;
        tape.layernorm(h_in, gamma, beta)?
    } else {
        h_in
    };
    let diff_kernel = kernel_on_tape(tape, z, &vars.diff)?;
    let attn_kernel = kernel_on_tape(tape, z, &vars.attn)?;
    let diff = diffusion_on_tape(tape, z, &diff_kernel)?;
    let local = local_on_tape(tape, e, z, &vars.local)?;
    let attn = diffusion_on_tape(tape, z, &attn_kernel)?;
    let out = tape.add(h_in, diff)?;
    let out = tape.add(out, local)?;
    let output = tape.add(out, attn)?;
    Ok(LayerNodes {
        output,
        diff_kernel,
        attn_kernel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::build_kernel;

    fn swap_kernel(dt: f64) -> KernelOutput {
        KernelOutput::from_weights(Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]), dt).unwrap()
    }

    #[test]
    fn two_token_consensus_step() {
        let h = Matrix::column(&[1.0, 3.0]);
        let k = swap_kernel(0.5);
        assert_eq!(diffusion_step(&h, &k).unwrap(), Matrix::column(&[1.0, -1.0]));
        assert_eq!(attention_diffusion(&h, &k).unwrap(), Matrix::column(&[1.0, -1.0]));
        let next = h.add(&diffusion_step(&h, &k).unwrap()).unwrap();
        assert_eq!(next, Matrix::column(&[2.0, 2.0]));
    }

    #[test]
    fn constant_and_empty_kernels_do_nothing() {
        let h = Matrix::from_rows(&[[0.7, -1.0], [0.7, -1.0], [0.7, -1.0]]);
        let mut rng = SeededRng::new(3);
        let w = Matrix::from_fn(3, 3, |t, s| if t == s { 0.0 } else { rng.uniform(0.0, 0.5) });
        let k = KernelOutput::from_weights(w, 0.3).unwrap();
        assert!(diffusion_step(&h, &k).unwrap().data().iter().all(|&v| v == 0.0));
        let zero = KernelOutput::from_weights(Matrix::zeros(3, 3), 0.9).unwrap();
        let h = rng.normal_matrix(3, 2, 1.0);
        assert!(diffusion_step(&h, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(diffusion_step(&Matrix::zeros(2, 2), &zero).is_err());
    }

    #[test]
    fn local_update_half_gate() {
        let p = LocalUpdateParams {
            w1: Matrix::zeros(2, 4),
            b1: Matrix::zeros(2, 1),
            w2: Matrix::identity(2),
            b2: Matrix::zeros(2, 1),
        };
        let h = Matrix::from_rows(&[[2.0, -4.0]]);
        let e = Matrix::from_rows(&[[5.0, 5.0]]);
        assert_eq!(local_update(&e, &h, &p).unwrap(), Matrix::from_rows(&[[1.0, -2.0]]));

        let mut rng = SeededRng::new(2);
        let p = LocalUpdateParams {
            w1: rng.normal_matrix(2, 4, 1.0),
            b1: rng.normal_matrix(2, 1, 1.0),
            w2: Matrix::zeros(2, 2),
            b2: Matrix::zeros(2, 1),
        };
        assert_eq!(local_update(&e, &h, &p).unwrap(), Matrix::zeros(1, 2));
        assert!(local_update(&Matrix::zeros(2, 2), &h, &p).is_err());
    }

    #[test]
    fn layernorm_cases() {
        let gamma = Matrix::filled(2, 1, 1.0);
        let beta = Matrix::zeros(2, 1);
        let out = layernorm(&Matrix::from_rows(&[[3.0, 3.0]]), &gamma, &beta).unwrap();
        assert_eq!(out, Matrix::zeros(1, 2));
        let out = layernorm(&Matrix::from_rows(&[[1.0, -1.0]]), &gamma, &beta).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out.get(0, 0) - expect).abs() < 1e-15);
        assert!((out.get(0, 1) + expect).abs() < 1e-15);

        let mut rng = SeededRng::new(4);
        let d = 12;
        let h = rng.normal_matrix(20, d, 3.0);
        let out = layernorm(&h, &Matrix::filled(d, 1, 1.0), &Matrix::zeros(d, 1)).unwrap();
        for r in 0..20 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn cloned_attention_kernel_matches_diffusion() {
        let mut rng = SeededRng::new(8);
        let p = KernelParams::init(&mut rng, 4, 5, MaskMode::Bidirectional);
        let h = rng.normal_matrix(6, 4, 1.0);
        let k = build_kernel(&h, &p).unwrap();
        let d = build_kernel(&h, &p.clone()).unwrap();
        assert_eq!(diffusion_step(&h, &k).unwrap(), attention_diffusion(&h, &d).unwrap());
    }

    #[test]
    fn shut_off_rate_silences_attention() {
        let mut rng = SeededRng::new(9);
        let mut p = KernelParams::init(&mut rng, 4, 5, MaskMode::Bidirectional);
        p.rho = -1e6;
        let h = rng.normal_matrix(6, 4, 1.0);
        let k = build_kernel(&h, &p).unwrap();
        assert!(attention_diffusion(&h, &k).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn single_token_layer_is_residual_plus_local() {
        let mut rng = SeededRng::new(10);
        let p = LayerParams::init(&mut rng, 4, 3, MaskMode::Bidirectional, false);
        let h = rng.normal_matrix(1, 4, 1.0);
        let e = rng.normal_matrix(1, 4, 1.0);
        let out = layer_forward(&h, &e, &p, false).unwrap();
        let expect = h.add(&local_update(&e, &h, &p.local).unwrap()).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn near_identity_layer() {
        let mut rng = SeededRng::new(11);
        let mut p = LayerParams::init(&mut rng, 3, 3, MaskMode::Bidirectional, false);
        p.diff_kernel.rho = -1e6;
        p.attn_kernel.rho = -1e6;
        p.local.w1 = Matrix::zeros(3, 6);
        p.local.w2 = Matrix::zeros(3, 3);
        let h = Matrix::filled(5, 3, 0.4);
        let e = rng.normal_matrix(5, 3, 1.0);
        let out = layer_forward(&h, &e, &p, false).unwrap();
        assert!(out.max_abs_diff(&h) <= 1e-10);
    }

    #[test]
    fn norm_flag_requires_norm_params() {
        let mut rng = SeededRng::new(12);
        let p = LayerParams::init(&mut rng, 2, 2, MaskMode::Causal, false);
        let h = rng.normal_matrix(3, 2, 1.0);
        assert!(matches!(layer_forward(&h, &h, &p, true), Err(Error::Config(_))));
    }
}
