//! Low-rank adapter recovery after pruning.
//!
//! Pruning removes whole heads and FFN channels; recovery re-fits the
//! model by training small low-rank corrections on top of the frozen base
//! weights.  Each adapted projection computes
//!
//! ```text
//! y = x·W0ᵀ + scale · (x·B)·A          scale = alpha / rank   (or 1.0)
//! ```
//!
//! with `B` (shape `[in × rank]`) initialized to zero and `A` (shape
//! `[rank × out]`) drawn from normal(0, 0.02).  A freshly attached adapter
//! therefore leaves the forward pass bit-identical, and training only ever
//! touches the factor matrices — the base checkpoint is frozen.
//!
//! Two optimizers are available: AdamW on backpropagated factor gradients,
//! and a forward-only mode that estimates factor gradients from paired
//! loss perturbations and applies plain SGD. Both follow a warmup-free
//! cosine learning-rate decay.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataio::Corpus;
use crate::error::{CoreError, Result};
use crate::model::{backward_with_adapters, forward_loss_with_adapters, ModelCheckpoint};
use crate::optim::{cosine_lr, AdamW, StepReport};
use crate::rng::RngStream;
use crate::tensor::{self, Tensor};
use crate::zo::{estimate_vector_gradients, ParamVector, PerturbSpec};

use std::collections::BTreeMap;

/// Standard deviation of the `A` factor initialization.
pub const LORA_INIT_STD: f32 = 0.02;

/// One low-rank adapter attached to a named base weight `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// Name of the base weight this adapter corrects.
    pub target: String,
    /// Up factor, shape `[rank × out]`, random-normal initialized.
    pub a: Tensor,
    /// Down factor, shape `[in × rank]`, zero initialized.
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    /// `true` applies the `alpha / rank` scale; `false` applies the raw
    /// correction (scale fixed at 1).
    pub scaled: bool,
}

impl LoraAdapter {
    /// Assemble an adapter from existing factors, validating shapes.
    pub fn from_parts(
        target: String,
        a: Tensor,
        b: Tensor,
        rank: usize,
        alpha: f64,
        scaled: bool,
    ) -> Result<LoraAdapter> {
        if rank == 0 {
            return Err(CoreError::config("adapter rank must be positive"));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(CoreError::config(format!(
                "adapter alpha must be finite and positive, got {alpha}"
            )));
        }
        if a.rank() != 2 || a.rows() != rank {
            return Err(CoreError::shape(format!(
                "factor A must be [rank x out] = [{rank} x _], got {:?}",
                a.shape()
            )));
        }
        if b.rank() != 2 || b.cols() != rank {
            return Err(CoreError::shape(format!(
                "factor B must be [in x rank] = [_ x {rank}], got {:?}",
                b.shape()
            )));
        }
        Ok(LoraAdapter {
            target,
            a,
            b,
            rank,
            alpha,
            scaled,
        })
    }

    /// Multiplier applied to the low-rank correction.
    pub fn scale(&self) -> f32 {
        if self.scaled {
            (self.alpha / self.rank as f64) as f32
        } else {
            1.0
        }
    }

    /// Dense correction in base-weight layout: `scale · (B·A)ᵀ`, shape
    /// `[out × in]`.
    pub fn delta(&self) -> Result<Tensor> {
        let ba = tensor::matmul(&self.b, &self.a)?; // [in × out]
        let mut d = ba.transposed();
        let s = self.scale();
        for v in d.data_mut() {
            *v *= s;
        }
        Ok(d)
    }

    /// Trainable parameters in this adapter.
    pub fn param_count(&self) -> u64 {
        (self.a.numel() + self.b.numel()) as u64
    }

    /// Does the adapter currently change the forward pass at all?
    pub fn is_active(&self) -> bool {
        self.b.data().iter().any(|&v| v != 0.0)
    }
}

/// A collection of adapters keyed by target weight name, plus a merge
/// latch: once folded into a checkpoint, a set refuses further training,
/// saving, or re-merging.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoraSet {
    adapters: BTreeMap<String, LoraAdapter>,
    merged: bool,
}

impl LoraSet {
    pub fn new() -> LoraSet {
        LoraSet::default()
    }

    /// Add an adapter; duplicate targets are rejected.
    pub fn insert(&mut self, adapter: LoraAdapter) -> Result<()> {
        self.ensure_unmerged()?;
        if self.adapters.contains_key(&adapter.target) {
            return Err(CoreError::config(format!(
                "duplicate adapter for target '{}'",
                adapter.target
            )));
        }
        self.adapters.insert(adapter.target.clone(), adapter);
        Ok(())
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.get(target)
    }

    pub fn get_mut(&mut self, target: &str) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(target)
    }

    /// Iterate `(target, adapter)` in target name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &LoraAdapter)> {
        self.adapters.iter()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Has this set already been folded into a checkpoint?
    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// Total trainable parameters across all adapters.
    pub fn param_count(&self) -> u64 {
        self.adapters.values().map(|a| a.param_count()).sum()
    }

    fn ensure_unmerged(&self) -> Result<()> {
        if self.merged {
            return Err(CoreError::config(
                "adapter set was already merged into a checkpoint",
            ));
        }
        Ok(())
    }
}

/// Attachment settings for [`attach_lora`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    /// Rank of every factor pair; capped at half the smaller dimension of
    /// each target weight.
    pub rank: usize,
    /// Numerator of the `alpha / rank` scale.
    pub alpha: f64,
    /// Apply the `alpha / rank` scale (`false` = raw correction).
    pub scaled: bool,
    /// Seed for the `A` factor initialization.
    pub seed: u64,
}

impl Default for LoraSpec {
    fn default() -> LoraSpec {
        LoraSpec {
            rank: 8,
            alpha: 16.0,
            scaled: true,
            seed: 0,
        }
    }
}

/// Attach freshly initialized adapters to the named targets, which must be
/// prunable projection matrices of `ckpt` (attention projections and FFN
/// matrices — embeddings, norms, and the output head are not adaptable).
///
/// Initialization draws each `A` from its own seeded stream, indexed by
/// the target's position in sorted target order, so attachment is
/// deterministic and independent of caller-supplied target order.
pub fn attach_lora(ckpt: &ModelCheckpoint, targets: &[String], spec: &LoraSpec) -> Result<LoraSet> {
    if targets.is_empty() {
        return Err(CoreError::config("no adapter targets given"));
    }
    if spec.rank == 0 {
        return Err(CoreError::config("adapter rank must be positive"));
    }
    if !(spec.alpha.is_finite() && spec.alpha > 0.0) {
        return Err(CoreError::config(format!(
            "adapter alpha must be finite and positive, got {}",
            spec.alpha
        )));
    }
    let prunable: BTreeSet<String> = ckpt.prunable_names().into_iter().collect();
    let mut sorted: BTreeSet<&String> = BTreeSet::new();
    for t in targets {
        if !prunable.contains(t) {
            return Err(CoreError::config(format!(
                "'{t}' is not an adaptable projection matrix",
            )));
        }
        if !sorted.insert(t) {
            return Err(CoreError::config(format!("duplicate adapter target '{t}'")));
        }
    }
    let mut set = LoraSet::new();
    for (ordinal, target) in sorted.into_iter().enumerate() {
        let w = ckpt.tensor(target)?;
        let (out_f, in_f) = (w.rows(), w.cols());
        let limit = out_f.min(in_f) / 2;
        if spec.rank > limit {
            return Err(CoreError::config(format!(
                "rank {} too large for '{target}' ({out_f}x{in_f}); maximum is {limit}",
                spec.rank
            )));
        }
        let mut rng = RngStream::new(spec.seed, ordinal as u64);
        let a = Tensor::random_normal(&mut rng, &[spec.rank, out_f], LORA_INIT_STD);
        let b = Tensor::zeros(&[in_f, spec.rank]);
        set.insert(LoraAdapter::from_parts(
            target.clone(),
            a,
            b,
            spec.rank,
            spec.alpha,
            spec.scaled,
        )?)?;
    }
    Ok(set)
}

/// One adapted projection in isolation: `x·W0ᵀ + scale·(x·B)·A`.
/// An all-zero `B` contributes exactly nothing (bit-identical output).
pub fn lora_forward(x: &Tensor, w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let mut y = tensor::linear(x, w0)?;
    if adapter.is_active() {
        let xb = tensor::matmul(x, &adapter.b)?;
        let delta = tensor::matmul(&xb, &adapter.a)?;
        if delta.shape() != y.shape() {
            return Err(CoreError::shape(format!(
                "adapter for '{}' produced shape {:?}, expected {:?}",
                adapter.target,
                delta.shape(),
                y.shape()
            )));
        }
        let s = adapter.scale();
        for (yv, dv) in y.data_mut().iter_mut().zip(delta.data().iter()) {
            *yv += s * *dv;
        }
    }
    Ok(y)
}

/// Fold every adapter into its base weight (`W += scale·(B·A)ᵀ`) and latch
/// the set as merged.  Validation runs before any weight is touched, so a
/// failed merge leaves the checkpoint intact.  Zero adapters are skipped
/// entirely, keeping the weights bit-identical.
pub fn merge_lora(ckpt: &mut ModelCheckpoint, set: &mut LoraSet) -> Result<()> {
    set.ensure_unmerged()?;
    // Validate everything first.
    for (target, ad) in set.iter() {
        let w = ckpt.tensor(target)?;
        if ad.b.rows() != w.cols() || ad.a.cols() != w.rows() {
            return Err(CoreError::shape(format!(
                "adapter for '{target}' has factors {:?}/{:?}, incompatible with weight {:?}",
                ad.a.shape(),
                ad.b.shape(),
                w.shape()
            )));
        }
    }
    for (target, ad) in set.adapters.iter() {
        if !ad.is_active() {
            continue;
        }
        let delta = ad.delta()?;
        let w = ckpt.tensor_mut(target)?;
        for (wv, dv) in w.data_mut().iter_mut().zip(delta.data().iter()) {
            *wv += *dv;
        }
    }
    set.merged = true;
    Ok(())
}

/// Optimizer choice for recovery training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// AdamW on backpropagated factor gradients.
    Adamw,
    /// SGD on forward-only (perturbation-estimated) factor gradients.
    ZoSgd,
}

/// Recovery training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate; decays to zero on a cosine. Zero is allowed
    /// (useful as an exact no-op baseline).
    pub learning_rate: f64,
    /// Passes over the train split.
    pub epochs: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Seed for batch shuffling (one derived seed per epoch).
    pub seed: u64,
    /// Hard cap on total optimizer steps (shortens the schedule horizon).
    pub max_steps: Option<usize>,
    /// Perturbation settings; required by [`Optimizer::ZoSgd`], which
    /// offsets the seed by the step index so directions vary per step.
    pub perturb: Option<PerturbSpec>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 2,
            batch_size: 64,
            optimizer: Optimizer::Adamw,
            seed: 0,
            max_steps: None,
            perturb: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(CoreError::config(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(CoreError::config("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config("batch_size must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(CoreError::config("max_steps must be positive when set"));
        }
        match (self.optimizer, &self.perturb) {
            (Optimizer::ZoSgd, None) => Err(CoreError::config(
                "optimizer zo_sgd requires a perturbation spec",
            )),
            (_, Some(p)) => p.validate(),
            _ => Ok(()),
        }
    }
}

/// Parameter-vector view over the factor matrices of a [`LoraSet`], in
/// target name order with `A` before `B` per target. Powers forward-only
/// recovery.
pub struct AdapterParams<'a> {
    names: Vec<String>,
    set: &'a mut LoraSet,
}

impl<'a> AdapterParams<'a> {
    pub fn new(set: &'a mut LoraSet) -> AdapterParams<'a> {
        let names: Vec<String> = set.adapters.keys().cloned().collect();
        AdapterParams { names, set }
    }

    /// Borrow the underlying adapter set (e.g. to run a forward pass).
    pub fn set(&self) -> &LoraSet {
        self.set
    }
}

impl ParamVector for AdapterParams<'_> {
    fn tensor_count(&self) -> usize {
        self.names.len() * 2
    }

    fn tensor_numel(&self, index: usize) -> usize {
        let ad = &self.set.adapters[&self.names[index / 2]];
        if index % 2 == 0 {
            ad.a.numel()
        } else {
            ad.b.numel()
        }
    }

    fn tensor_data_mut(&mut self, index: usize) -> &mut [f32] {
        let ad = self
            .set
            .adapters
            .get_mut(&self.names[index / 2])
            .expect("adapter name recorded at view construction");
        if index % 2 == 0 {
            ad.a.data_mut()
        } else {
            ad.b.data_mut()
        }
    }

    fn tensor_label(&self, index: usize) -> String {
        let suffix = if index % 2 == 0 { "a" } else { "b" };
        format!("lora.{}.{}", self.names[index / 2], suffix)
    }
}

/// Train the adapter factors on the corpus train split with the base
/// checkpoint frozen. Returns one [`StepReport`] per optimizer step.
///
/// Each training window holds exactly `max_seq_len` tokens (the model's
/// full context: `max_seq_len − 1` scored predictions plus their shifted
/// targets), reshuffled each epoch with a seed derived from `cfg.seed` and
/// the epoch index. The learning rate follows a warmup-free cosine decay
/// over the planned step count. A non-finite training loss aborts with an
/// error naming the step.
pub fn train_recovery(
    ckpt: &ModelCheckpoint,
    adapters: &mut LoraSet,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    adapters.ensure_unmerged()?;
    if adapters.is_empty() {
        return Err(CoreError::config("no adapters to train"));
    }
    if ckpt.config.max_seq_len < 2 {
        return Err(CoreError::config(
            "model context too short to form a training window",
        ));
    }
    let seq_len = ckpt.config.max_seq_len - 1;
    let per_epoch = corpus
        .train_batches(cfg.batch_size, seq_len, cfg.seed)?
        .len();
    let mut total_steps = cfg.epochs * per_epoch;
    if let Some(cap) = cfg.max_steps {
        total_steps = total_steps.min(cap);
    }

    let names: Vec<String> = adapters.adapters.keys().cloned().collect();
    let shapes: Vec<Vec<usize>> = names
        .iter()
        .flat_map(|n| {
            let ad = &adapters.adapters[n];
            [ad.a.shape().to_vec(), ad.b.shape().to_vec()]
        })
        .collect();
    let mut opt = AdamW::new(&shapes, 0.0);

    let mut reports = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let epoch_seed = cfg.seed.wrapping_add(epoch as u64);
        for batch in corpus.train_batches(cfg.batch_size, seq_len, epoch_seed)? {
            if step >= total_steps {
                break 'epochs;
            }
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);
            let loss = match cfg.optimizer {
                Optimizer::Adamw => {
                    let (loss, grads) = backward_with_adapters(ckpt, adapters, &batch)
                        .map_err(|e| e.with_context(format!("step {step}")))?;
                    if !loss.is_finite() {
                        return Err(CoreError::non_finite(format!(
                            "training loss diverged at step {step}"
                        )));
                    }
                    for (i, name) in names.iter().enumerate() {
                        let (da, db) = grads.get(name).ok_or_else(|| {
                            CoreError::data(format!("no factor gradients for '{name}'"))
                        })?;
                        let ad = adapters.get_mut(name).expect("adapter exists");
                        opt.update(2 * i, ad.a.data_mut(), da.data(), lr)?;
                        opt.update(2 * i + 1, ad.b.data_mut(), db.data(), lr)?;
                    }
                    opt.advance();
                    loss
                }
                Optimizer::ZoSgd => {
                    let mut spec = cfg.perturb.clone().expect("validated");
                    spec.base_seed = spec.base_seed.wrapping_add(step as u64);
                    let mut view = AdapterParams::new(adapters);
                    let (grads, mean_loss) =
                        estimate_vector_gradients(&mut view, &spec, |v| {
                            forward_loss_with_adapters(ckpt, v.set(), &batch)
                        })
                        .map_err(|e| e.with_context(format!("step {step}")))?;
                    for (i, g) in grads.iter().enumerate() {
                        let data = view.tensor_data_mut(i);
                        for (w, gv) in data.iter_mut().zip(g.iter()) {
                            *w = ((*w as f64) - lr * gv) as f32;
                        }
                    }
                    mean_loss
                }
            };
            reports.push(StepReport { step, loss, lr });
            step += 1;
        }
    }
    Ok(reports)
}
