//! Shared optimizer machinery: AdamW updates, the cosine learning-rate
//! schedule, and per-step training reports.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// One optimizer step's outcome, logged by every training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    /// Zero-based global step index.
    pub step: usize,
    /// Training loss measured on this step's batch (before the update).
    pub loss: f64,
    /// Learning rate applied on this step.
    pub lr: f64,
}

/// Cosine decay from `base` at step 0 to 0 at step `total` (no warmup):
/// `lr(t) = base * 0.5 * (1 + cos(pi * t / total))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with decoupled weight decay. Moments are stored per parameter
/// tensor, addressed by a caller-chosen slot index; update math runs in
/// f64 regardless of the f32 parameter storage.
#[derive(Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Completed update count (bias correction uses `t = steps + 1`).
    steps: usize,
}

impl AdamW {
    /// Fresh optimizer state for parameter tensors of the given shapes.
    pub fn new(shapes: &[Vec<usize>], weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            steps: 0,
        }
    }

    /// Number of parameter slots.
    pub fn slots(&self) -> usize {
        self.m.len()
    }

    /// Apply one AdamW update to slot `slot`. All slots participating in a
    /// step must be updated before [`AdamW::advance`] is called.
    pub fn update(&mut self, slot: usize, params: &mut [f32], grads: &[f32], lr: f64) -> Result<()> {
        if slot >= self.m.len() {
            return Err(CoreError::config(format!(
                "optimizer slot {slot} out of range ({} slots)",
                self.m.len()
            )));
        }
        if params.len() != self.m[slot].numel() || grads.len() != params.len() {
            return Err(CoreError::shape(format!(
                "optimizer slot {slot}: params {} / grads {} / state {}",
                params.len(),
                grads.len(),
                self.m[slot].numel()
            )));
        }
        let t = (self.steps + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let m = self.m[slot].data_mut();
        // Split borrow: m and v are distinct fields.
        let v = self.v[slot].data_mut();
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let mi = self.beta1 * (m[i] as f64) + (1.0 - self.beta1) * g;
            let vi = self.beta2 * (v[i] as f64) + (1.0 - self.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let p = params[i] as f64;
            let update = m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p;
            params[i] = (p - lr * update) as f32;
        }
        Ok(())
    }

    /// Advance the shared step counter after all slots were updated.
    pub fn advance(&mut self) {
        self.steps += 1;
    }
}
