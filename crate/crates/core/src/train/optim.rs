use super::{TrainConfig, TrainError};
use crate::numerics::NumericFormat;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Learning rate at `step`: a linear ramp over the warmup, then a cosine
/// decay reaching zero at `total_steps`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let (warmup, total) = (cfg.warmup_steps, cfg.total_steps);
    let lr = cfg.learning_rate;
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr;
    }
    let p = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    (lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())).max(0.0)
}

/// Scale every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = crate::numerics::l2_norm(grads.iter().map(|g| g.data()));
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per named parameter, created on first use in
/// the master format.
#[derive(Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor, Tensor)> {
        self.moments.get(name)
    }

    pub fn bytes(&self) -> usize {
        self.moments.values().map(|(m, v)| m.bytes() + v.bytes()).sum()
    }
}

/// A trainable tensor with its gradient for one optimizer step.
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
}

/// One AdamW step with bias correction and decoupled weight decay.
///
/// `p ← p·(1 − lr·wd) − (lr / (1 − β₁ᵗ)) · m / (√v / √(1 − β₂ᵗ) + eps)`,
/// with parameters and moments rounded to `master`. Gradients are checked
/// for finiteness before anything is modified.
pub fn adamw_step(
    slots: &mut [ParamSlot<'_>],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamWConfig,
    master: NumericFormat,
) -> Result<(), TrainError> {
    for slot in slots.iter() {
        if slot.grad.shape() != slot.value.shape() {
            return Err(TrainError::Shape(format!(
                "gradient for `{}` has shape {:?}, parameter {:?}",
                slot.name,
                slot.grad.shape(),
                slot.value.shape()
            )));
        }
        if !slot.grad.is_finite() {
            return Err(TrainError::NonFiniteGradient(slot.name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2_sqrt = (1.0 - hp.beta2.powi(t)).sqrt();
    let step_size = lr / bc1;
    let decay = 1.0 - lr * hp.weight_decay;
    for slot in slots.iter_mut() {
        let n = slot.value.numel();
        let shape = slot.value.shape().to_vec();
        let (m, v) = state.moments.entry(slot.name.to_string()).or_insert_with(|| {
            (
                Tensor::zeros(&shape).quantized(master),
                Tensor::zeros(&shape).quantized(master),
            )
        });
        let (m, v) = (m.data_mut(), v.data_mut());
        let g = slot.grad.data();
        let p = slot.value.data_mut();
        for i in 0..n {
            m[i] = master.quantize(hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i]);
            v[i] = master.quantize(hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i]);
            let denom = v[i].sqrt() / bc2_sqrt + hp.eps;
            p[i] = master.quantize(p[i] * decay - step_size * m[i] / denom);
        }
    }
    Ok(())
}
