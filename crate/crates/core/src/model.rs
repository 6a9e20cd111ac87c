//! Sequence classifier: embedding plus sinusoidal positions, a stack of
//! diffusion layers with independent parameters, mean pooling and a linear head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelParams, MaskMode};
use crate::layer::{layer_on_tape, LayerNodes, LayerParams, LayerVars};
use crate::tensor::{Fault, Matrix, SeededRng, Tape, Var};

const INIT_STDDEV: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub layers: usize,
    pub t_max: usize,
    pub num_classes: usize,
    pub mask_mode: MaskMode,
    pub psi_hidden: usize,
    pub use_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2,
            d: 32,
            layers: 2,
            t_max: 64,
            num_classes: 2,
            mask_mode: MaskMode::Bidirectional,
            psi_hidden: 16,
            use_norm: true,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Checks counts and width parity. `layers = 0` is accepted so the head
    /// can be exercised on its own.
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d", self.d),
            ("t_max", self.t_max),
            ("num_classes", self.num_classes),
            ("psi_hidden", self.psi_hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model.d must be even for the sinusoidal position code, got {}",
                self.d
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub wc: Matrix,
    pub bc: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub head: Head,
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let d = config.d;
        let embedding = rng.normal_matrix(config.vocab_size, d, INIT_STDDEV);
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(&mut rng, d, config.psi_hidden, config.mask_mode, config.use_norm))
            .collect();
        let head = Head {
            wc: rng.normal_matrix(config.num_classes, d, INIT_STDDEV),
            bc: Matrix::zeros(config.num_classes, 1),
        };
        Ok(Self {
            embedding,
            layers,
            head,
        })
    }

    /// Every parameter tensor with its stable name, in registration order.
    /// Scalars appear as 1×1 tensors.
    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = vec![("embedding".to_string(), self.embedding.clone())];
        for (i, layer) in self.layers.iter().enumerate() {
            for (side, k) in [("diff", &layer.diff_kernel), ("attn", &layer.attn_kernel)] {
                let p = format!("layers.{i}.{side}");
                out.push((format!("{p}.rho"), Matrix::scalar(k.rho)));
                out.push((format!("{p}.log_sigma_g"), Matrix::scalar(k.log_sigma_g)));
                out.push((format!("{p}.psi.u"), k.psi.u.clone()));
                out.push((format!("{p}.psi.v"), k.psi.v.clone()));
                out.push((format!("{p}.psi.w"), k.psi.w.clone()));
                out.push((format!("{p}.psi.b"), Matrix::scalar(k.psi.b)));
            }
            let l = &layer.local;
            out.push((format!("layers.{i}.local.w1"), l.w1.clone()));
            out.push((format!("layers.{i}.local.b1"), l.b1.clone()));
            out.push((format!("layers.{i}.local.w2"), l.w2.clone()));
            out.push((format!("layers.{i}.local.b2"), l.b2.clone()));
            if let Some(n) = &layer.norm {
                out.push((format!("layers.{i}.norm.gamma"), n.gamma.clone()));
                out.push((format!("layers.{i}.norm.beta"), n.beta.clone()));
            }
        }
        out.push(("head.wc".to_string(), self.head.wc.clone()));
        out.push(("head.bc".to_string(), self.head.bc.clone()));
        out
    }

    /// Rebuilds parameters from named tensors. Every name expected by `config`
    /// must be present with the right shape, and no other names are allowed.
    pub fn from_named_tensors(config: &ModelConfig, tensors: &[(String, Matrix)]) -> Result<Self> {
        let template = Self::init(config)?;
        let expected = template.named_tensors();
        let mut given: BTreeMap<&str, &Matrix> = BTreeMap::new();
        for (name, m) in tensors {
            if given.insert(name.as_str(), m).is_some() {
                return Err(Error::Input(format!("duplicate tensor {name}")));
            }
        }
        let mut problems = Vec::new();
        for (name, m) in &expected {
            match given.remove(name.as_str()) {
                None => problems.push(format!("missing tensor {name}")),
                Some(g) if g.shape() != m.shape() => problems.push(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    g.shape(),
                    m.shape()
                )),
                Some(_) => {}
            }
        }
        for name in given.keys() {
            problems.push(format!("unknown tensor {name}"));
        }
        if !problems.is_empty() {
            return Err(Error::Input(problems.join("; ")));
        }
        let mut params = template;
        params.assign(tensors.iter().map(|(n, m)| (n.as_str(), m)))?;
        Ok(params)
    }

    /// Overwrites tensors in place by name.
    fn assign<'a>(&mut self, tensors: impl Iterator<Item = (&'a str, &'a Matrix)>) -> Result<()> {
        for (name, m) in tensors {
            let slot = self.slot_mut(name)?;
            match slot {
                Slot::Matrix(dst) => *dst = m.clone(),
                Slot::Scalar(dst) => *dst = m.item(),
            }
        }
        Ok(())
    }

    fn slot_mut(&mut self, name: &str) -> Result<Slot<'_>> {
        let unknown = || Error::Input(format!("unknown tensor {name}"));
        match name {
            "embedding" => return Ok(Slot::Matrix(&mut self.embedding)),
            "head.wc" => return Ok(Slot::Matrix(&mut self.head.wc)),
            "head.bc" => return Ok(Slot::Matrix(&mut self.head.bc)),
            _ => {}
        }
        let rest = name.strip_prefix("layers.").ok_or_else(unknown)?;
        let (idx, field) = rest.split_once('.').ok_or_else(unknown)?;
        let idx: usize = idx.parse().map_err(|_| unknown())?;
        let layer = self.layers.get_mut(idx).ok_or_else(unknown)?;
        let slot = if let Some(f) = field.strip_prefix("diff.") {
            kernel_slot(&mut layer.diff_kernel, f)
        } else if let Some(f) = field.strip_prefix("attn.") {
            kernel_slot(&mut layer.attn_kernel, f)
        } else {
            let LayerParams { local, norm, .. } = layer;
            match field {
                "local.w1" => Some(Slot::Matrix(&mut local.w1)),
                "local.b1" => Some(Slot::Matrix(&mut local.b1)),
                "local.w2" => Some(Slot::Matrix(&mut local.w2)),
                "local.b2" => Some(Slot::Matrix(&mut local.b2)),
                "norm.gamma" => norm.as_mut().map(|n| Slot::Matrix(&mut n.gamma)),
                "norm.beta" => norm.as_mut().map(|n| Slot::Matrix(&mut n.beta)),
                _ => None,
            }
        };
        slot.ok_or_else(unknown)
    }

    /// Applies `f(name, tensor)` to every tensor and writes the result back.
    pub fn update_each(&mut self, mut f: impl FnMut(usize, &str, &mut Matrix) -> Result<()>) -> Result<()> {
        let names = self.named_tensors();
        for (i, (name, mut m)) in names.into_iter().enumerate() {
            f(i, &name, &mut m)?;
            match self.slot_mut(&name)? {
                Slot::Matrix(dst) => *dst = m,
                Slot::Scalar(dst) => *dst = m.item(),
            }
        }
        Ok(())
    }

    /// Copy with a single entry of tensor `name` replaced (row-major `index`).
    pub fn with_entry(&self, name: &str, index: usize, value: f64) -> Result<ModelParams> {
        let mut out = self.clone();
        match out.slot_mut(name)? {
            Slot::Matrix(m) if index < m.len() => m.data_mut()[index] = value,
            Slot::Scalar(s) if index == 0 => *s = value,
            _ => return Err(Error::Input(format!("index {index} out of range for tensor {name}"))),
        }
        Ok(out)
    }

    pub fn delta_t_per_layer(&self) -> Vec<[f64; 2]> {
        self.layers
            .iter()
            .map(|l| [l.diff_kernel.delta_t_eff(), l.attn_kernel.delta_t_eff()])
            .collect()
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let first = tape.len();
        let embedding = tape.leaf(self.embedding.clone());
        let layers = self.layers.iter().map(|l| LayerVars::register(tape, l)).collect();
        let wc = tape.leaf(self.head.wc.clone());
        let bc = tape.leaf(self.head.bc.clone());
        let leaves = tape.vars_from(first);
        ModelVars {
            embedding,
            layers,
            wc,
            bc,
            leaves,
        }
    }
}

fn kernel_slot<'a>(k: &'a mut KernelParams, field: &str) -> Option<Slot<'a>> {
    Some(match field {
        "rho" => Slot::Scalar(&mut k.rho),
        "log_sigma_g" => Slot::Scalar(&mut k.log_sigma_g),
        "psi.u" => Slot::Matrix(&mut k.psi.u),
        "psi.v" => Slot::Matrix(&mut k.psi.v),
        "psi.w" => Slot::Matrix(&mut k.psi.w),
        "psi.b" => Slot::Scalar(&mut k.psi.b),
        _ => return None,
    })
}

enum Slot<'a> {
    Matrix(&'a mut Matrix),
    Scalar(&'a mut f64),
}

/// Tape handles for all model parameters.
pub struct ModelVars {
    pub embedding: Var,
    pub layers: Vec<LayerVars>,
    pub wc: Var,
    pub bc: Var,
    /// Every leaf in [`ModelParams::named_tensors`] order.
    pub leaves: Vec<Var>,
}

/// Sinusoidal code for position `t` (0-based) as a d×1 column.
pub fn pos_enc(t: usize, d: usize) -> Result<Matrix> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("position code needs an even width, got {d}")));
    }
    let mut out = Matrix::zeros(d, 1);
    for i in 0..d / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / d as f64);
        let angle = t as f64 / freq;
        out.set(2 * i, 0, angle.sin());
        out.set(2 * i + 1, 0, angle.cos());
    }
    Ok(out)
}

/// T×d matrix whose row t is `pos_enc(t)`.
pub fn positional_table(t_len: usize, d: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(t_len, d);
    for t in 0..t_len {
        m.row_mut(t).copy_from_slice(pos_enc(t, d)?.data());
    }
    Ok(m)
}

fn check_tokens(tokens: &[usize], config: &ModelConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > config.t_max {
        return Err(Error::Input(format!(
            "sequence length {} exceeds t_max {}",
            tokens.len(),
            config.t_max
        )));
    }
    if let Some((i, &tok)) = tokens.iter().enumerate().find(|(_, &t)| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token {tok} at index {i} out of range for vocab_size {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Returns `(H⁰, E)`: embeddings plus positions, and the raw embeddings.
pub fn encode_input(tokens: &[usize], params: &ModelParams, config: &ModelConfig) -> Result<(Matrix, Matrix)> {
    check_tokens(tokens, config)?;
    let e = Matrix::from_fn(tokens.len(), config.d, |t, c| params.embedding.get(tokens[t], c));
    let h0 = e.add(&positional_table(tokens.len(), config.d)?)?;
    Ok((h0, e))
}

pub struct ForwardNodes {
    pub logits: Var,
    pub layers: Vec<LayerNodes>,
}

pub fn forward_on_tape(
    tape: &mut Tape,
    tokens: &[usize],
    vars: &ModelVars,
    config: &ModelConfig,
) -> Result<ForwardNodes> {
    check_tokens(tokens, config)?;
    let e = tape.gather_rows(vars.embedding, tokens)?;
    let pos = tape.leaf(positional_table(tokens.len(), config.d)?);
    let mut h = tape.add(e, pos)?;
    let mut layers = Vec::with_capacity(vars.layers.len());
    for lv in &vars.layers {
        let nodes = layer_on_tape(tape, h, e, lv, config.use_norm)?;
        h = nodes.output;
        layers.push(nodes);
    }
    let pooled = tape.mean_rows(h)?;
    let logits = tape.matmul(vars.wc, pooled)?;
    let logits = tape.add(logits, vars.bc)?;
    Ok(ForwardNodes { logits, layers })
}

/// Class logits (C×1) for one sequence.
pub fn forward(tokens: &[usize], params: &ModelParams, config: &ModelConfig) -> Result<Matrix> {
    let mut tape = Tape::no_grad();
    let vars = params.register(&mut tape);
    let nodes = forward_on_tape(&mut tape, tokens, &vars, config)?;
    Ok(tape.value(nodes.logits).clone())
}

pub fn predict(tokens: &[usize], params: &ModelParams, config: &ModelConfig) -> Result<usize> {
    let logits = forward(tokens, params, config)?;
    Ok(argmax(logits.data()))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn cross_entropy(logits: &Matrix, label: usize) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, label)?;
    Ok(tape.value(loss).item())
}

/// Loss on one labelled sequence and its gradient for every parameter
/// tensor, in [`ModelParams::named_tensors`] order.
pub fn loss_and_grad(
    tokens: &[usize],
    label: usize,
    params: &ModelParams,
    config: &ModelConfig,
    fault: Option<Fault>,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let vars = params.register(&mut tape);
    let nodes = forward_on_tape(&mut tape, tokens, &vars, config)?;
    let loss = tape.cross_entropy(nodes.logits, label)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item();
    Ok((value, vars.leaves.iter().map(|&v| grads.get(v)).collect()))
}

/// Loss only, for finite differences.
pub fn loss_value(tokens: &[usize], label: usize, params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    cross_entropy(&forward(tokens, params, config)?, label)
}
