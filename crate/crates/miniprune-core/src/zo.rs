//! Forward-only gradient estimation by simultaneous random perturbation.
//!
//! The whole parameter vector is nudged by `±ε·z` for a seeded random
//! direction `z`, the loss is measured on each side, and the per-weight
//! gradient estimate is
//!
//! ```text
//! ĝ_k = (L(W+εz) − L(W−εz)) / (2ε·z_k)
//! ```
//!
//! averaged over `n_samples` directions. Two properties drive the design:
//!
//! * **Memory**: `z` is never materialized. Perturbation regenerates it
//!   tensor-by-tensor from a counter-based stream keyed by
//!   `(base_seed, sample_id, tensor ordinal)`, and the in-place cycle
//!   `(+ε, −2ε, +ε)` replaces a saved weight copy (accepting a bounded
//!   floating-point drift, tested at ≤ 1e-5 per cycle). Gradient
//!   reconstruction replays the same streams one tensor at a time.
//! * **Safety**: dividing by a Gaussian `z_k` is heavy-tailed. The divide is
//!   implemented literally as the default; an optional clamp constrains
//!   `|z_k| ≥ 0.1` on the Gaussian path, and with clamping disabled a
//!   component below that floor raises a division-guard error instead of
//!   returning a huge value. The two-point `{−1,+1}` distribution never
//!   trips the guard (dividing and multiplying by `z_k` coincide there).

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{forward_loss, ModelCheckpoint, TokenBatch};
use crate::rng::{Distribution, RngStream};

/// Minimum `|z_k|` a gradient division will accept; also the value the
/// optional Gaussian clamp saturates at.
pub const CLAMP_FLOOR: f64 = 0.1;

/// How and how often to perturb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSpec {
    /// Perturbation scale ε.
    pub epsilon: f64,
    /// Directions to average over.
    pub n_samples: u64,
    /// Distribution of the direction components.
    pub distribution: Distribution,
    /// Base seed; every (sample, tensor) pair derives its own stream.
    #[serde(rename = "seed")]
    pub base_seed: u64,
    /// Clamp Gaussian components to `|z| ≥ 0.1` instead of erroring.
    pub clamp: bool,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            n_samples: 1,
            distribution: Distribution::Gaussian,
            base_seed: 0,
            clamp: false,
        }
    }
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(CoreError::config(format!(
                "perturbation epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.n_samples == 0 {
            return Err(CoreError::config("n_samples must be at least 1"));
        }
        if self.n_samples > u32::MAX as u64 {
            return Err(CoreError::config(format!(
                "n_samples {} exceeds the supported maximum {}",
                self.n_samples,
                u32::MAX
            )));
        }
        Ok(())
    }
}

/// One two-sided loss measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossDelta {
    pub sample_id: u64,
    pub loss_plus: f64,
    pub loss_minus: f64,
    /// Base stream id for this sample; the tensor ordinal is OR-ed into the
    /// low bits at replay time, so this value pins down the exact `z` used.
    pub stream_id: u64,
}

/// Anything exposing an ordered list of mutable f32 tensors. The
/// perturbation machinery works against this view so it can drive either a
/// whole checkpoint or just a set of adapter factors.
pub trait ParamVector {
    fn tensor_count(&self) -> usize;
    fn tensor_numel(&self, index: usize) -> usize;
    fn tensor_data_mut(&mut self, index: usize) -> &mut [f32];
    /// Stable human-readable name for diagnostics and gradient lookup.
    fn tensor_label(&self, index: usize) -> String;
}

impl ParamVector for ModelCheckpoint {
    fn tensor_count(&self) -> usize {
        ModelCheckpoint::tensor_count(self)
    }

    fn tensor_numel(&self, index: usize) -> usize {
        self.tensor_by_ordinal(index)
            .expect("tensor ordinal in range")
            .1
            .numel()
    }

    fn tensor_data_mut(&mut self, index: usize) -> &mut [f32] {
        self.tensor_by_ordinal_mut(index)
            .expect("tensor ordinal in range")
            .1
            .data_mut()
    }

    fn tensor_label(&self, index: usize) -> String {
        self.tensor_by_ordinal(index)
            .expect("tensor ordinal in range")
            .0
            .to_string()
    }
}

/// Stream id for one (sample, tensor) pair.
fn stream_id(sample_id: u64, ordinal: usize) -> u64 {
    (sample_id << 32) | ordinal as u64
}

/// Draw one direction component, honoring the Gaussian clamp.
fn draw(stream: &mut RngStream, spec: &PerturbSpec) -> f64 {
    let z = stream.next_from(spec.distribution);
    if spec.clamp && z.abs() < CLAMP_FLOOR {
        CLAMP_FLOOR.copysign(z)
    } else {
        z
    }
}

/// Apply `w += scale·z` elementwise over every tensor in the view, with `z`
/// regenerated from seeded streams (one per tensor) and never stored.
pub fn perturb_param_vector<V: ParamVector + ?Sized>(
    view: &mut V,
    spec: &PerturbSpec,
    sample_id: u64,
    scale: f64,
) -> Result<()> {
    spec.validate()?;
    if !scale.is_finite() {
        return Err(CoreError::config(format!(
            "perturbation scale must be finite, got {scale}"
        )));
    }
    if scale == 0.0 {
        return Ok(());
    }
    for ordinal in 0..view.tensor_count() {
        let mut stream = RngStream::new(spec.base_seed, stream_id(sample_id, ordinal));
        for w in view.tensor_data_mut(ordinal) {
            let z = draw(&mut stream, spec);
            // Rounding to f32 here keeps `scale` and `−2·scale` perturbations
            // exactly proportional, so the (+ε, −2ε, +ε) cycle is symmetric.
            *w += (scale * z) as f32;
        }
    }
    Ok(())
}

/// [`perturb_param_vector`] on a whole checkpoint (all tensors: projections,
/// embeddings, and norm parameters alike).
pub fn perturb_in_place(
    ckpt: &mut ModelCheckpoint,
    spec: &PerturbSpec,
    sample_id: u64,
    scale: f64,
) -> Result<()> {
    perturb_param_vector(ckpt, spec, sample_id, scale)
}

/// Measure `L(W+εz)` and `L(W−εz)` for one sample using exactly two loss
/// evaluations, restoring the weights afterwards via the in-place
/// `(+ε, −2ε, +ε)` cycle. On a loss error the weights are restored before
/// the error propagates.
pub fn estimate_loss_delta_with<V, F>(
    view: &mut V,
    spec: &PerturbSpec,
    sample_id: u64,
    mut loss: F,
) -> Result<LossDelta>
where
    V: ParamVector,
    F: FnMut(&V) -> Result<f64>,
{
    spec.validate()?;
    let ctx = format!("perturbation sample {sample_id}");
    perturb_param_vector(view, spec, sample_id, spec.epsilon)?;
    let loss_plus = match loss(view) {
        Ok(v) => v,
        Err(e) => {
            perturb_param_vector(view, spec, sample_id, -spec.epsilon)?;
            return Err(e.with_context(&ctx));
        }
    };
    perturb_param_vector(view, spec, sample_id, -2.0 * spec.epsilon)?;
    let loss_minus = match loss(view) {
        Ok(v) => v,
        Err(e) => {
            perturb_param_vector(view, spec, sample_id, spec.epsilon)?;
            return Err(e.with_context(&ctx));
        }
    };
    perturb_param_vector(view, spec, sample_id, spec.epsilon)?;
    if !loss_plus.is_finite() || !loss_minus.is_finite() {
        return Err(CoreError::non_finite(format!(
            "{ctx}: two-sided losses ({loss_plus}, {loss_minus})"
        )));
    }
    Ok(LossDelta {
        sample_id,
        loss_plus,
        loss_minus,
        stream_id: sample_id << 32,
    })
}

/// [`estimate_loss_delta_with`] for a checkpoint with the standard
/// next-token loss on a calibration batch.
pub fn estimate_loss_delta(
    ckpt: &mut ModelCheckpoint,
    batch: &TokenBatch,
    spec: &PerturbSpec,
    sample_id: u64,
) -> Result<LossDelta> {
    estimate_loss_delta_with(ckpt, spec, sample_id, |c| forward_loss(c, batch))
}

/// The per-weight estimate for one sample: `(L₊ − L₋) / (2ε·z_k)`, exactly
/// as the central difference divides by the direction component. Components
/// under the guard floor are refused (enable clamping or use the two-point
/// distribution instead).
pub fn per_weight_gradient(delta: &LossDelta, z_element: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(CoreError::config(format!(
            "perturbation epsilon must be positive and finite, got {epsilon}"
        )));
    }
    if z_element.abs() < CLAMP_FLOOR {
        return Err(CoreError::division_guard(format!(
            "sample {}: direction component {z_element} is below the {CLAMP_FLOOR} floor \
             (enable clamping or use the rademacher distribution)",
            delta.sample_id
        )));
    }
    Ok((delta.loss_plus - delta.loss_minus) / (2.0 * epsilon * z_element))
}

/// Replay the direction streams for one tensor ordinal and average the
/// per-weight estimates across all recorded samples.
fn replay_tensor_gradient(
    spec: &PerturbSpec,
    deltas: &[LossDelta],
    ordinal: usize,
    numel: usize,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0f64; numel];
    for delta in deltas {
        let mut stream = RngStream::new(spec.base_seed, stream_id(delta.sample_id, ordinal));
        for a in acc.iter_mut() {
            let z = draw(&mut stream, spec);
            *a += per_weight_gradient(delta, z, spec.epsilon)?;
        }
    }
    let inv = 1.0 / deltas.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok(acc)
}

/// Reconstruction view over a finished estimation run: holds only the loss
/// deltas and tensor catalogue, and rebuilds per-weight gradients one tensor
/// at a time on demand.
#[derive(Debug, Clone)]
pub struct ZoGradients {
    spec: PerturbSpec,
    deltas: Vec<LossDelta>,
    /// `(name, numel)` in perturbation-ordinal order.
    tensors: Vec<(String, usize)>,
}

impl ZoGradients {
    pub fn spec(&self) -> &PerturbSpec {
        &self.spec
    }

    pub fn deltas(&self) -> &[LossDelta] {
        &self.deltas
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Mean of the two-sided losses across samples (a smoothed loss value).
    pub fn mean_loss(&self) -> f64 {
        let s: f64 = self
            .deltas
            .iter()
            .map(|d| 0.5 * (d.loss_plus + d.loss_minus))
            .sum();
        s / self.deltas.len() as f64
    }

    /// Averaged per-weight gradient estimates for one tensor, in row-major
    /// element order.
    pub fn grad(&self, name: &str) -> Result<Vec<f64>> {
        let ordinal = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| {
                CoreError::config(format!("no perturbed tensor named `{name}`"))
            })?;
        replay_tensor_gradient(&self.spec, &self.deltas, ordinal, self.tensors[ordinal].1)
    }
}

/// Run the full estimation: `n_samples` two-sided measurements on the
/// checkpoint (restored in place after each), returning the reconstruction
/// view. Peak extra memory is one tensor's worth of f64s during later
/// reconstruction — `z` and `ĝ` never exist whole.
pub fn estimate_gradients(
    ckpt: &mut ModelCheckpoint,
    batch: &TokenBatch,
    spec: &PerturbSpec,
) -> Result<ZoGradients> {
    spec.validate()?;
    let tensors: Vec<(String, usize)> = (0..ModelCheckpoint::tensor_count(ckpt))
        .map(|i| {
            let (name, t) = ckpt.tensor_by_ordinal(i).expect("ordinal in range");
            (name.to_string(), t.numel())
        })
        .collect();
    let mut deltas = Vec::with_capacity(spec.n_samples as usize);
    for sample_id in 0..spec.n_samples {
        deltas.push(estimate_loss_delta(ckpt, batch, spec, sample_id)?);
    }
    Ok(ZoGradients { spec: spec.clone(), deltas, tensors })
}

/// Estimate gradients for an arbitrary parameter view with a caller-supplied
/// loss, returning `(per-tensor gradients, mean smoothed loss)`. This powers
/// forward-only training of adapter factors.
pub fn estimate_vector_gradients<V, F>(
    view: &mut V,
    spec: &PerturbSpec,
    mut loss: F,
) -> Result<(Vec<Vec<f64>>, f64)>
where
    V: ParamVector,
    F: FnMut(&V) -> Result<f64>,
{
    spec.validate()?;
    let mut deltas = Vec::with_capacity(spec.n_samples as usize);
    for sample_id in 0..spec.n_samples {
        deltas.push(estimate_loss_delta_with(view, spec, sample_id, &mut loss)?);
    }
    let mut grads = Vec::with_capacity(view.tensor_count());
    for ordinal in 0..view.tensor_count() {
        grads.push(replay_tensor_gradient(
            spec,
            &deltas,
            ordinal,
            view.tensor_numel(ordinal),
        )?);
    }
    let mean = deltas
        .iter()
        .map(|d| 0.5 * (d.loss_plus + d.loss_minus))
        .sum::<f64>()
        / deltas.len() as f64;
    Ok((grads, mean))
}
