//! Synthetic tasks, Adam and the training loop.

mod adam;
mod checkpoint;
mod tasks;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, load_model_checkpoint, save_checkpoint, Checkpoint, MAGIC};
pub use tasks::{generate_task, Task, TaskBatch, COPY_FIRST_VOCAB};

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::tensor::{Matrix, SeededRng};

/// Size of the held-out set scored at every evaluation.
pub const EVAL_SAMPLES: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(rename = "T")]
    pub seq_len: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub eval_every: u64,
    pub seed: u64,
    pub cosine_lr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Majority,
            seq_len: 15,
            steps: 3000,
            batch_size: 32,
            lr: 3e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.0,
            eval_every: 100,
            seed: 42,
            cosine_lr: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be nonnegative".into()));
        }
        for b in self.betas {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.betas must lie in [0, 1), got {b}")));
            }
        }
        if self.eps < 0.0 {
            return Err(Error::Config("train.eps must be nonnegative".into()));
        }
        self.task.check_length(self.seq_len)
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate for 1-based update `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if !self.cosine_lr || self.steps == 0 {
            return self.lr;
        }
        let progress = (step.saturating_sub(1)) as f64 / self.steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}

/// Checks that the model can represent the task.
pub fn check_compatible(model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    model.validate()?;
    train.validate()?;
    if model.vocab_size < train.task.vocab_size() {
        return Err(Error::Config(format!(
            "model.vocab_size {} too small for task {} (needs {})",
            model.vocab_size,
            train.task.name(),
            train.task.vocab_size()
        )));
    }
    if model.num_classes < train.task.num_classes() {
        return Err(Error::Config(format!(
            "model.num_classes {} too small for task {} (needs {})",
            model.num_classes,
            train.task.name(),
            train.task.num_classes()
        )));
    }
    if train.seq_len > model.t_max {
        return Err(Error::Config(format!(
            "train.T {} exceeds model.t_max {}",
            train.seq_len, model.t_max
        )));
    }
    Ok(())
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    /// `[δt, δt_att]` for every layer.
    pub dt_per_layer: Vec<[f64; 2]>,
    pub lr: f64,
}

/// Everything needed to investigate a non-finite loss.
#[derive(Clone, Debug)]
pub struct DivergenceReport {
    pub step: u64,
    pub loss: f64,
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub dt_per_layer: Vec<[f64; 2]>,
}

impl fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "non-finite loss {} at step {}", self.loss, self.step)?;
        writeln!(f, "dt per layer: {:?}", self.dt_per_layer)?;
        for (seq, label) in self.sequences.iter().zip(&self.labels) {
            writeln!(f, "  label {label}: {seq:?}")?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricsRecord>,
}

/// Mean loss and mean gradient over a batch. Per-sample work runs in
/// parallel; the reduction is sequential so results do not depend on
/// scheduling.
pub fn batch_loss_and_grad(
    batch: &TaskBatch,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let per_sample: Vec<(f64, Vec<Matrix>)> = batch
        .sequences
        .par_iter()
        .zip(&batch.labels)
        .map(|(seq, &label)| model::loss_and_grad(seq, label, params, config, None))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::Contract("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi)?;
        }
    }
    Ok((loss / n, grads.into_iter().map(|g| g.scale(1.0 / n)).collect()))
}

pub fn batch_loss(batch: &TaskBatch, params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    let losses: Vec<f64> = batch
        .sequences
        .par_iter()
        .zip(&batch.labels)
        .map(|(seq, &label)| model::loss_value(seq, label, params, config))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Fraction of sequences whose arg-max prediction equals the label.
pub fn accuracy(batch: &TaskBatch, params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    let hits: Vec<bool> = batch
        .sequences
        .par_iter()
        .zip(&batch.labels)
        .map(|(seq, &label)| Ok(model::predict(seq, params, config)? == label))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / batch.len().max(1) as f64)
}

/// The held-out set scored during training.
pub fn eval_batch(train: &TrainConfig, samples: usize) -> Result<TaskBatch> {
    generate_task(
        train.task,
        train.seq_len,
        samples,
        &mut SeededRng::new(train.eval_seed()),
    )
}

/// Trains from the default initialization, calling `on_metrics` for every
/// record as it is produced.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut on_metrics: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    check_compatible(model_config, train_config)?;
    let mut params = ModelParams::init(model_config)?;
    let hyper = train_config.hyper();
    let mut states: Vec<AdamState> = params
        .named_tensors()
        .iter()
        .map(|(_, m)| AdamState::zeros_like(m))
        .collect();
    let mut data_rng = SeededRng::new(train_config.seed);
    let held_out = eval_batch(train_config, EVAL_SAMPLES)?;
    let mut log = Vec::new();

    let mut emit = |step: u64, loss: f64, lr: f64, params: &ModelParams| -> Result<()> {
        let record = MetricsRecord {
            step,
            loss,
            accuracy: accuracy(&held_out, params, model_config)?,
            dt_per_layer: params.delta_t_per_layer(),
            lr,
        };
        on_metrics(&record);
        log.push(record);
        Ok(())
    };

    if train_config.steps == 0 {
        let batch = generate_task(
            train_config.task,
            train_config.seq_len,
            train_config.batch_size,
            &mut data_rng,
        )?;
        let loss = batch_loss(&batch, &params, model_config)?;
        emit(0, loss, train_config.lr_at(1), &params)?;
    }

    for step in 1..=train_config.steps {
        let batch = generate_task(
            train_config.task,
            train_config.seq_len,
            train_config.batch_size,
            &mut data_rng,
        )?;
        // the only contract a valid batch can break is the kernels' finite-input
        // check, i.e. activations already overflowed
        let (loss, grads) = match batch_loss_and_grad(&batch, &params, model_config) {
            Err(Error::Contract(_)) => (f64::NAN, Vec::new()),
            other => other?,
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(Box::new(DivergenceReport {
                step,
                loss,
                sequences: batch.sequences,
                labels: batch.labels,
                dt_per_layer: params.delta_t_per_layer(),
            })));
        }
        let lr = train_config.lr_at(step);
        if step == 1 {
            emit(0, loss, lr, &params)?;
        }
        params.update_each(|i, _, p| adam_step(p, &grads[i], &mut states[i], step, lr, &hyper))?;
        if params.named_tensors().iter().any(|(_, m)| !m.is_finite()) {
            return Err(Error::Divergence(Box::new(DivergenceReport {
                step,
                loss: f64::NAN,
                sequences: batch.sequences,
                labels: batch.labels,
                dt_per_layer: params.delta_t_per_layer(),
            })));
        }
        if step % train_config.eval_every == 0 || step == train_config.steps {
            emit(step, loss, lr, &params)?;
        }
    }

    let checkpoint = Checkpoint::from_params(&params, train_config.steps);
    Ok(TrainOutcome {
        params,
        checkpoint,
        log,
    })
}
