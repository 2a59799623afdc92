//! Optimization: learning-rate schedule, decoupled-weight-decay adaptive
//! moments, and the training loop over supervised examples.
//!
//! The loop is fully deterministic given (seed, data, config): epoch
//! shuffles and dropout draw from independent seeded streams, and all math
//! is double precision on a single thread. Each optimizer step processes
//! one batch by gradient accumulation, scales the summed gradients to a
//! per-token mean, clips the global norm, and logs loss, rate, and norm.

pub mod audit;

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::datum_rng;
use crate::model::{checkpoint, DropoutCtx, Example, Model, ModelError, Tensor2};

/// Errors raised by schedule, optimizer, and training loop.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("bad train config: {reason}")]
    BadConfig { reason: String },
    #[error("no training data")]
    NoData,
    #[error("non-finite loss at step {step} ({fingerprint})")]
    NonFinite { step: usize, fingerprint: String },
    #[error("finite-difference epsilon {epsilon} underflows parameter {name}[{index}]")]
    EpsilonUnderflow {
        epsilon: f64,
        name: String,
        index: usize,
    },
    #[error("batch loss is already zero; nothing to audit")]
    DegenerateBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate reached at the end of warmup. Zero is allowed as
    /// a diagnostic (the loop then never changes parameters).
    pub peak_lr: f64,
    /// Fraction of all optimizer steps spent ramping 0 → peak.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: String| Err(TrainError::BadConfig { reason });
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !self.peak_lr.is_finite() || self.peak_lr < 0.0 {
            return bad(format!("peak_lr {} must be finite and >= 0", self.peak_lr));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            ));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        Ok(())
    }
}

/// Learning rate before the `step`-th update (0-based): linear ramp from
/// zero to `peak_lr` over the first `warmup_fraction` of `total_steps`,
/// then linear decay back to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::BadConfig {
            reason: "total_steps must be positive".into(),
        });
    }
    if step > total_steps {
        return Err(TrainError::BadConfig {
            reason: format!("step {step} beyond total_steps {total_steps}"),
        });
    }
    let warmup = config.warmup_fraction * total_steps as f64;
    let s = step as f64;
    let rate = if s <= warmup {
        config.peak_lr * s / warmup
    } else {
        config.peak_lr * (total_steps as f64 - s) / (total_steps as f64 - warmup)
    };
    Ok(rate)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer with decoupled weight decay: the decay
/// multiplies parameters by exactly `1 − lr·decay` each step, independent
/// of the gradient-driven update.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    slots: std::collections::BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            slots: std::collections::BTreeMap::new(),
        }
    }

    /// Completed update count.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every named tensor, consuming its accumulated
    /// gradient (`g` is left untouched; callers zero it per batch).
    pub fn apply(&mut self, params: Vec<(String, &mut Tensor2)>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let shrink = 1.0 - lr * self.weight_decay;
        for (name, t) in params {
            let (m, v) = self
                .slots
                .entry(name)
                .or_insert_with(|| (Array2::zeros(t.v.raw_dim()), Array2::zeros(t.v.raw_dim())));
            ndarray::Zip::from(m as &mut Array2<f64>)
                .and(v as &mut Array2<f64>)
                .and(&t.g)
                .for_each(|m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                });
            if lr == 0.0 {
                continue; // moments advance, parameters stay bit-identical
            }
            t.v.mapv_inplace(|x| x * shrink);
            ndarray::Zip::from(&mut t.v)
                .and(m as &Array2<f64>)
                .and(v as &Array2<f64>)
                .for_each(|x, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One optimizer step's log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    /// Mean negative log-likelihood per target token in the batch.
    pub mean_loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping (after per-token scaling).
    pub grad_norm: f64,
    pub tokens: usize,
}

/// Outcome of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// One entry per optimizer step.
    pub steps: Vec<StepLog>,
    /// Mean validation loss after each epoch (empty if no validation set).
    pub valid_curve: Vec<f64>,
    pub wall_secs: f64,
    /// Path of the persisted final checkpoint, when a sink was given.
    pub checkpoint: Option<String>,
}

/// Where (and with what provenance) to persist checkpoints.
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub vocab_hash: &'a str,
}

/// Train `model` in place. Batches are taken from a fresh seeded shuffle
/// each epoch; gradients accumulate over the batch, are scaled to the
/// per-token mean, and are clipped by global norm. With a sink, the final
/// model is written to `latest.json` and the best-validation model (when a
/// validation set is given) to `best.json`.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    valid_set: &[Example],
    config: &TrainConfig,
    sink: Option<&CheckpointSink<'_>>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::NoData);
    }
    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut optimizer = AdamW::new(config.weight_decay);
    let mut dropout_rng = datum_rng(config.seed, "train/dropout");
    let dropout_p = model.config.dropout;

    let start = Instant::now();
    let mut steps: Vec<StepLog> = Vec::with_capacity(total_steps);
    let mut valid_curve = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut datum_rng(config.seed, &format!("train/shuffle/{epoch}")));
        for chunk in order.chunks(config.batch_size) {
            model.zero_grads();
            let mut loss_sum = 0.0;
            let mut tokens = 0usize;
            for &index in chunk {
                let (loss, count) = if dropout_p > 0.0 {
                    let mut ctx = DropoutCtx::train(dropout_p, &mut dropout_rng);
                    model.forward_backward(&train_set[index], &mut ctx)?
                } else {
                    model.forward_backward(&train_set[index], &mut DropoutCtx::eval())?
                };
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        step,
                        fingerprint: batch_fingerprint(epoch, chunk),
                    });
                }
                loss_sum += loss;
                tokens += count;
            }
            model.scale_grads(1.0 / tokens as f64);
            let grad_norm = model.grad_norm();
            if !grad_norm.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    fingerprint: batch_fingerprint(epoch, chunk),
                });
            }
            if grad_norm > config.clip_norm {
                model.scale_grads(config.clip_norm / grad_norm);
            }
            let lr = lr_at(step, total_steps, config)?;
            optimizer.apply(model.params_mut(), lr);
            steps.push(StepLog {
                step,
                epoch,
                mean_loss: loss_sum / tokens as f64,
                lr,
                grad_norm,
                tokens,
            });
            step += 1;
        }
        if !valid_set.is_empty() {
            let valid = mean_valid_loss(model, valid_set)?;
            if best.as_ref().is_none_or(|(b, _)| valid < *b) {
                best = Some((valid, model.clone()));
            }
            valid_curve.push(valid);
        }
    }

    let mut checkpoint_path = None;
    if let Some(sink) = sink {
        let latest = sink.dir.join("latest.json");
        checkpoint::save(model, sink.vocab_hash, step as u64, &latest)?;
        if let Some((_, best_model)) = &best {
            checkpoint::save(
                best_model,
                sink.vocab_hash,
                step as u64,
                &sink.dir.join("best.json"),
            )?;
        }
        checkpoint_path = Some(latest.display().to_string());
    }

    Ok(TrainReport {
        steps,
        valid_curve,
        wall_secs: start.elapsed().as_secs_f64(),
        checkpoint: checkpoint_path,
    })
}

/// Mean per-token loss over a held-out set, in evaluation mode.
pub fn mean_valid_loss(model: &Model, valid_set: &[Example]) -> Result<f64, TrainError> {
    if valid_set.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    for example in valid_set {
        let (loss, count) = model.forward_loss(example, &mut DropoutCtx::eval())?;
        loss_sum += loss;
        tokens += count;
    }
    Ok(loss_sum / tokens as f64)
}

fn batch_fingerprint(epoch: usize, chunk: &[usize]) -> String {
    let shown = &chunk[..chunk.len().min(8)];
    format!(
        "epoch {epoch}, batch of {} examples, first indices {shown:?}",
        chunk.len()
    )
}
