//! Next-token loss, gradients and the AdamW trainer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vocab::TokenId;

use super::Model;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate (production scale: 1e-5).
    pub learning_rate: f64,
    /// Linear warmup length (production scale: 1000).
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub macro_steps: u64,
    pub rng_seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            warmup_steps: 100,
            weight_decay: 0.033,
            grad_clip_norm: 1.0,
            batch_size: 8,
            macro_steps: 1000,
            rng_seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if self.weight_decay < 0.0 || self.weight_decay.is_nan() {
            return fail("weight_decay must be non-negative");
        }
        if !(self.grad_clip_norm > 0.0) {
            return fail("grad_clip_norm must be positive (inf disables clipping)");
        }
        if self.batch_size == 0 || self.macro_steps == 0 {
            return fail("batch_size and macro_steps must be positive");
        }
        if self.warmup_steps > self.macro_steps {
            return fail("warmup_steps must not exceed macro_steps");
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("adam betas must be in [0, 1) and eps positive");
        }
        Ok(())
    }

    /// Learning rate at 1-based `step`: linear warmup, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Mean cross-entropy of `logits` (`targets.len() x vocab`) against
/// `targets`.
pub fn cross_entropy<T: Scalar>(logits: &[T], targets: &[TokenId], vocab: usize) -> Result<f64> {
    if targets.is_empty() || logits.len() != targets.len() * vocab {
        return Err(Error::Shape(format!(
            "logits of length {} do not match {} targets over {vocab} classes",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
        if t as usize >= vocab {
            return Err(Error::Shape(format!("target {t} outside {vocab} classes")));
        }
        total += row_nll(row, t as usize).0;
    }
    Ok(total / targets.len() as f64)
}

/// Negative log-likelihood of `target` and the log-sum-exp of `row`.
fn row_nll<T: Scalar>(row: &[T], target: usize) -> (f64, f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64().unwrap_or(f64::NAN)));
    let sum: f64 = row.iter().map(|&v| (v.to_f64().unwrap_or(f64::NAN) - max).exp()).sum();
    let lse = max + sum.ln();
    (lse - row[target].to_f64().unwrap_or(f64::NAN), lse)
}

/// Token-weighted mean next-token loss over a batch.
pub fn batch_loss<T: Scalar>(model: &Model<T>, batch: &[&[TokenId]]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in batch {
        if seq.len() < 2 {
            return Err(Error::invalid("training sequences need at least two tokens"));
        }
        let logits = model.forward(seq)?;
        let v = model.config().vocab_size;
        total += cross_entropy(&logits[..(seq.len() - 1) * v], &seq[1..], v)? * (seq.len() - 1) as f64;
        count += seq.len() - 1;
    }
    Ok(total / count as f64)
}

/// Token-weighted mean loss over many sequences, skipping those shorter
/// than two tokens.
pub fn mean_loss<T: Scalar>(model: &Model<T>, seqs: &[Vec<TokenId>]) -> Result<f64> {
    let batch: Vec<&[TokenId]> = seqs.iter().filter(|s| s.len() >= 2).map(Vec::as_slice).collect();
    if batch.is_empty() {
        return Err(Error::invalid("no sequence with a prediction target"));
    }
    batch_loss(model, &batch)
}

/// Loss and parameter gradient (flat, same layout as the parameters).
pub fn loss_and_grad<T: Scalar>(model: &Model<T>, batch: &[&[TokenId]]) -> Result<(f64, Vec<T>)> {
    let mut grads = vec![T::zero(); model.params.len()];
    let loss = accumulate_grad(model, batch, &mut grads)?;
    Ok((loss, grads))
}

fn accumulate_grad<T: Scalar>(model: &Model<T>, batch: &[&[TokenId]], grads: &mut [T]) -> Result<f64> {
    let v = model.config().vocab_size;
    let count: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if count == 0 || batch.iter().any(|s| s.len() < 2) {
        return Err(Error::invalid("training sequences need at least two tokens"));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for seq in batch {
        let (logits, cache) = model.forward_train(seq)?;
        let mut dlogits = vec![T::zero(); logits.len()];
        for (t, &target) in seq[1..].iter().enumerate() {
            let row = &logits[t * v..(t + 1) * v];
            let (nll, lse) = row_nll(row, target as usize);
            total += nll;
            let drow = &mut dlogits[t * v..(t + 1) * v];
            for (d, &x) in drow.iter_mut().zip(row) {
                *d = T::from_f64_lossy((x.to_f64().unwrap_or(f64::NAN) - lse).exp() * inv);
            }
            drow[target as usize] -= T::from_f64_lossy(inv);
        }
        model.backward(&cache, &dlogits, grads);
    }
    Ok(total * inv)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// A model plus AdamW state.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub cfg: TrainConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    decay_mask: Vec<bool>,
    grads: Vec<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        let n = model.params.len();
        Self::resume(model, cfg, vec![T::zero(); n], vec![T::zero(); n], 0)
    }

    pub fn resume(model: Model<T>, cfg: TrainConfig, m: Vec<T>, v: Vec<T>, step: u64) -> Result<Self> {
        cfg.validate()?;
        let n = model.params.len();
        if m.len() != n || v.len() != n {
            return Err(Error::Shape(format!("optimizer moments must have {n} entries")));
        }
        let mut decay_mask = vec![false; n];
        for t in model.layout().tensors() {
            decay_mask[t.offset..t.offset + t.len()].fill(t.decays());
        }
        Ok(Self { model, cfg, m, v, step, decay_mask, grads: vec![T::zero(); n] })
    }

    /// One optimizer step on `batch`. `batch_index` is reported if the
    /// loss is not finite, in which case the parameters are left untouched.
    pub fn train_step(&mut self, batch: &[&[TokenId]], batch_index: u64) -> Result<StepMetrics> {
        self.grads.fill(T::zero());
        let loss = accumulate_grad(&self.model, batch, &mut self.grads)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { batch: batch_index, loss });
        }
        let norm = self.grads.iter().map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { batch: batch_index, loss: norm });
        }
        let clip = if norm > self.cfg.grad_clip_norm { self.cfg.grad_clip_norm / norm } else { 1.0 };

        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        let a = self.cfg.adam;
        let bc1 = 1.0 - a.beta1.powf(self.step as f64);
        let bc2 = 1.0 - a.beta2.powf(self.step as f64);
        let (b1, b2) = (T::from_f64_lossy(a.beta1), T::from_f64_lossy(a.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - a.beta1), T::from_f64_lossy(1.0 - a.beta2));
        let (clip, lr_t, eps) = (T::from_f64_lossy(clip), T::from_f64_lossy(lr), T::from_f64_lossy(a.eps));
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let decay = T::from_f64_lossy(lr * self.cfg.weight_decay);
        for i in 0..self.model.params.len() {
            let g = self.grads[i] * clip;
            self.m[i] = b1 * self.m[i] + one_b1 * g;
            self.v[i] = b2 * self.v[i] + one_b2 * g * g;
            let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + eps);
            let p = &mut self.model.params[i];
            if self.decay_mask[i] {
                *p -= decay * *p;
            }
            *p -= lr_t * update;
        }
        Ok(StepMetrics { step: self.step, loss, grad_norm: norm, lr })
    }
}
