//! Forward evaluation: batched loss, logits, calibration capture, and greedy
//! decoding.
//!
//! All entry points funnel through one internal routine so that the loss
//! computed while capturing activation statistics, or while caching
//! intermediates for the backward pass, is bit-identical to the plain
//! forward loss.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::recovery::LoraSet;
use crate::tensor::{self, Tensor};

use super::{FfnKind, ModelCheckpoint, LN_EPS};

/// A rectangular batch of token ids: `rows` sequences of `cols` tokens each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    rows: usize,
    cols: usize,
    tokens: Vec<u32>,
}

impl TokenBatch {
    /// Build a batch from a flat row-major token buffer.
    pub fn new(rows: usize, cols: usize, tokens: Vec<u32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CoreError::data("token batch must be non-empty"));
        }
        if tokens.len() != rows * cols {
            return Err(CoreError::data(format!(
                "token buffer holds {} ids but {rows}x{cols} needs {}",
                tokens.len(),
                rows * cols
            )));
        }
        Ok(Self { rows, cols, tokens })
    }

    /// Build a batch from equally long sequences.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let rows = seqs.len();
        if rows == 0 {
            return Err(CoreError::data("token batch must be non-empty"));
        }
        let cols = seqs[0].len();
        for (i, s) in seqs.iter().enumerate() {
            if s.len() != cols {
                return Err(CoreError::data(format!(
                    "sequence {i} has length {} but the batch width is {cols}",
                    s.len()
                )));
            }
        }
        let mut tokens = Vec::with_capacity(rows * cols);
        for s in seqs {
            tokens.extend_from_slice(s);
        }
        Self::new(rows, cols, tokens)
    }

    /// A single-sequence batch.
    pub fn single(tokens: &[u32]) -> Result<Self> {
        Self::new(1, tokens.len(), tokens.to_vec())
    }

    /// Number of sequences.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Tokens per sequence.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Token at sequence `row`, position `pos`.
    pub fn token(&self, row: usize, pos: usize) -> u32 {
        self.tokens[row * self.cols + pos]
    }

    /// One sequence as a slice.
    pub fn sequence(&self, row: usize) -> &[u32] {
        &self.tokens[row * self.cols..(row + 1) * self.cols]
    }
}

/// Per-input-feature squared-activation sums collected during calibration
/// forwards, keyed by the weight matrix that consumes the activation.
///
/// For every linear `y = x·Wᵀ` on the prunable list, the record accumulates
/// `Σ_tokens x_j²` per input feature `j`; the ℓ2 feature norm over the
/// calibration set is the square root of the stored sum. Sums are kept in
/// f64 so the result is independent of how calibration tokens are split
/// into batches (up to rounding in the final square root).
#[derive(Debug, Clone, Default)]
pub struct ActivationRecord {
    sq_sums: BTreeMap<String, Vec<f64>>,
    token_count: u64,
}

impl ActivationRecord {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total calibration tokens folded into this record.
    pub fn token_count(&self) -> u64 {
        self.token_count
    }

    pub fn is_empty(&self) -> bool {
        self.token_count == 0
    }

    /// Names of the weight matrices with recorded input statistics.
    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.sq_sums.keys()
    }

    /// Squared-activation sums for the inputs of the named weight.
    pub fn sq_sums(&self, name: &str) -> Result<&[f64]> {
        self.sq_sums
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| CoreError::data(format!("no activation statistics recorded for `{name}`")))
    }

    /// Fold another record (e.g. from a further calibration batch) into this
    /// one. Feature widths must agree on shared names.
    pub fn merge(&mut self, other: &ActivationRecord) -> Result<()> {
        for (name, sums) in &other.sq_sums {
            match self.sq_sums.get_mut(name) {
                Some(mine) => {
                    if mine.len() != sums.len() {
                        return Err(CoreError::shape(format!(
                            "activation statistics for `{name}` have width {} here and {} in the merged record",
                            mine.len(),
                            sums.len()
                        )));
                    }
                    for (m, s) in mine.iter_mut().zip(sums.iter()) {
                        *m += *s;
                    }
                }
                None => {
                    self.sq_sums.insert(name.clone(), sums.clone());
                }
            }
        }
        self.token_count += other.token_count;
        Ok(())
    }

    /// Accumulate the squared entries of an activation matrix (rows =
    /// tokens) under the name of the weight that consumes it.
    pub fn record_activations(&mut self, name: &str, x: &Tensor) {
        let c = x.cols();
        let sums = self
            .sq_sums
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0f64; c]);
        debug_assert_eq!(sums.len(), c);
        for i in 0..x.rows() {
            let row = x.row(i);
            for j in 0..c {
                let v = row[j] as f64;
                sums[j] += v * v;
            }
        }
    }

    /// Count calibration tokens (call once per forward batch).
    pub fn add_tokens(&mut self, n: u64) {
        self.token_count += n;
    }
}

/// Intermediates cached by a forward pass for the hand-written backward.
/// One entry per layer unless noted. All row counts are `N = batch·seq`.
pub(crate) struct ForwardCaches {
    /// Residual-stream input of each layer (before the first norm).
    pub(crate) layer_inputs: Vec<Tensor>,
    /// Per-row `(mean, rstd)` pairs of the attention-side norm, interleaved.
    pub(crate) ln1_stats: Vec<Vec<f32>>,
    pub(crate) ln1_out: Vec<Tensor>,
    pub(crate) q: Vec<Tensor>,
    pub(crate) k: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
    /// Attention weights, layout `[(batch·head)·t + i][j]` flattened.
    pub(crate) probs: Vec<Vec<f32>>,
    /// Per-head context vectors (softmax-weighted value sums).
    pub(crate) ctx: Vec<Tensor>,
    /// Residual stream after the attention block (input of the FFN norm).
    pub(crate) mid: Vec<Tensor>,
    pub(crate) ln2_stats: Vec<Vec<f32>>,
    pub(crate) ln2_out: Vec<Tensor>,
    /// FFN up-projection pre-activation.
    pub(crate) ffn_u: Vec<Tensor>,
    /// FFN gate pre-activation (3-matrix FFN only).
    pub(crate) ffn_g: Vec<Option<Tensor>>,
    /// FFN activation output (what the down-projection consumes).
    pub(crate) ffn_act: Vec<Tensor>,
    /// Residual stream entering the final norm.
    pub(crate) final_input: Tensor,
    pub(crate) final_stats: Vec<f32>,
    /// Final-norm output (what the head consumes).
    pub(crate) hn: Tensor,
}

pub(crate) struct ForwardArtifacts {
    pub(crate) loss: Option<f64>,
    pub(crate) logits: Tensor,
    pub(crate) caches: Option<ForwardCaches>,
}

fn validate_batch(ckpt: &ModelCheckpoint, batch: &TokenBatch, need_targets: bool) -> Result<()> {
    let cfg = &ckpt.config;
    if batch.cols() > cfg.max_seq_len {
        return Err(CoreError::data(format!(
            "sequence length {} exceeds the model maximum {}",
            batch.cols(),
            cfg.max_seq_len
        )));
    }
    if need_targets && batch.cols() < 2 {
        return Err(CoreError::data(
            "next-token loss needs sequences of at least 2 tokens",
        ));
    }
    if let Some(&bad) = batch.tokens.iter().find(|&&t| (t as usize) >= cfg.vocab_size) {
        return Err(CoreError::data(format!(
            "token id {bad} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// `y = x·Wᵀ` for the named base weight, plus the low-rank correction when an
/// adapter is attached (`y += scale·(x·B)·A`). An all-zero `B` contributes
/// exactly nothing, keeping freshly adapted models bit-identical.
fn apply_linear(
    x: &Tensor,
    ckpt: &ModelCheckpoint,
    name: &str,
    adapters: Option<&LoraSet>,
) -> Result<Tensor> {
    let mut y = tensor::linear(x, ckpt.tensor(name)?)?;
    if let Some(set) = adapters {
        if let Some(ad) = set.get(name) {
            if ad.b.data().iter().any(|&v| v != 0.0) {
                let xb = tensor::matmul(x, &ad.b)?;
                let delta = tensor::matmul(&xb, &ad.a)?;
                if delta.shape() != y.shape() {
                    return Err(CoreError::shape(format!(
                        "adapter for `{name}` produced a correction of the wrong shape"
                    )));
                }
                let s = ad.scale();
                for (yv, dv) in y.data_mut().iter_mut().zip(delta.data().iter()) {
                    *yv += s * *dv;
                }
            }
        }
    }
    Ok(y)
}

pub(crate) fn forward_full(
    ckpt: &ModelCheckpoint,
    adapters: Option<&LoraSet>,
    batch: &TokenBatch,
    want_loss: bool,
    want_caches: bool,
    mut capture: Option<&mut ActivationRecord>,
) -> Result<ForwardArtifacts> {
    let cfg = &ckpt.config;
    validate_batch(ckpt, batch, want_loss)?;
    let (b, t) = (batch.rows(), batch.cols());
    let n = b * t;
    let d = cfg.d_model;
    let dh = cfg.d_head();

    // Token + learned positional embeddings.
    let tok = ckpt.tensor("embed.tok")?;
    let pos = ckpt.tensor("embed.pos")?;
    let mut h = Tensor::zeros(&[n, d]);
    for bi in 0..b {
        for ti in 0..t {
            let dst = h.row_mut(bi * t + ti);
            let te = tok.row(batch.token(bi, ti) as usize);
            let pe = pos.row(ti);
            for j in 0..d {
                dst[j] = te[j] + pe[j];
            }
        }
    }

    let n_layers = cfg.n_layers;
    let mut caches = if want_caches {
        Some(ForwardCaches {
            layer_inputs: Vec::with_capacity(n_layers),
            ln1_stats: Vec::with_capacity(n_layers),
            ln1_out: Vec::with_capacity(n_layers),
            q: Vec::with_capacity(n_layers),
            k: Vec::with_capacity(n_layers),
            v: Vec::with_capacity(n_layers),
            probs: Vec::with_capacity(n_layers),
            ctx: Vec::with_capacity(n_layers),
            mid: Vec::with_capacity(n_layers),
            ln2_stats: Vec::with_capacity(n_layers),
            ln2_out: Vec::with_capacity(n_layers),
            ffn_u: Vec::with_capacity(n_layers),
            ffn_g: Vec::with_capacity(n_layers),
            ffn_act: Vec::with_capacity(n_layers),
            final_input: Tensor::zeros(&[0]),
            final_stats: Vec::new(),
            hn: Tensor::zeros(&[0]),
        })
    } else {
        None
    };

    let mut exp_scratch = vec![0.0f64; t];
    let mut score_scratch = vec![0.0f32; t];

    for l in 0..n_layers {
        let heads = ckpt.layer_shapes[l].n_heads;
        let width = heads * dh;
        if let Some(c) = caches.as_mut() {
            c.layer_inputs.push(h.clone());
        }

        // Attention block.
        let g1 = ckpt.tensor(&format!("layers.{l}.attn_norm.gamma"))?;
        let b1 = ckpt.tensor(&format!("layers.{l}.attn_norm.beta"))?;
        let mut ln1 = Tensor::zeros(&[n, d]);
        let mut st1 = vec![0.0f32; 2 * n];
        tensor::layer_norm_forward(&h, g1, b1, LN_EPS, &mut ln1, &mut st1);
        if let Some(rec) = capture.as_deref_mut() {
            rec.record_activations(&format!("layers.{l}.attn.wq"), &ln1);
            rec.record_activations(&format!("layers.{l}.attn.wk"), &ln1);
            rec.record_activations(&format!("layers.{l}.attn.wv"), &ln1);
        }
        let q = apply_linear(&ln1, ckpt, &format!("layers.{l}.attn.wq"), adapters)?;
        let k = apply_linear(&ln1, ckpt, &format!("layers.{l}.attn.wk"), adapters)?;
        let v = apply_linear(&ln1, ckpt, &format!("layers.{l}.attn.wv"), adapters)?;

        let inv_sqrt = 1.0f32 / (dh as f32).sqrt();
        let mut probs = vec![0.0f32; b * heads * t * t];
        let mut ctx = Tensor::zeros(&[n, width]);
        for bi in 0..b {
            for hh in 0..heads {
                let hs = hh * dh;
                let he = hs + dh;
                for i in 0..t {
                    let qrow = &q.row(bi * t + i)[hs..he];
                    let mut mx = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let s = tensor::dot(qrow, &k.row(bi * t + j)[hs..he]) * inv_sqrt;
                        score_scratch[j] = s;
                        mx = mx.max(s);
                    }
                    if !mx.is_finite() {
                        return Err(CoreError::non_finite(format!(
                            "attention scores in layer {l}"
                        )));
                    }
                    let mut den = 0.0f64;
                    for j in 0..=i {
                        let e = ((score_scratch[j] - mx) as f64).exp();
                        exp_scratch[j] = e;
                        den += e;
                    }
                    let pbase = ((bi * heads + hh) * t + i) * t;
                    let crow = &mut ctx.row_mut(bi * t + i)[hs..he];
                    for j in 0..=i {
                        let p = (exp_scratch[j] / den) as f32;
                        probs[pbase + j] = p;
                        tensor::axpy(crow, p, &v.row(bi * t + j)[hs..he]);
                    }
                }
            }
        }
        if let Some(rec) = capture.as_deref_mut() {
            rec.record_activations(&format!("layers.{l}.attn.wo"), &ctx);
        }
        let attn_out = apply_linear(&ctx, ckpt, &format!("layers.{l}.attn.wo"), adapters)?;
        for (hv, av) in h.data_mut().iter_mut().zip(attn_out.data().iter()) {
            *hv += *av;
        }
        if let Some(c) = caches.as_mut() {
            c.ln1_stats.push(st1);
            c.ln1_out.push(ln1);
            c.q.push(q);
            c.k.push(k);
            c.v.push(v);
            c.probs.push(probs);
            c.ctx.push(ctx);
            c.mid.push(h.clone());
        }

        // Feed-forward block.
        let g2 = ckpt.tensor(&format!("layers.{l}.ffn_norm.gamma"))?;
        let b2 = ckpt.tensor(&format!("layers.{l}.ffn_norm.beta"))?;
        let mut ln2 = Tensor::zeros(&[n, d]);
        let mut st2 = vec![0.0f32; 2 * n];
        tensor::layer_norm_forward(&h, g2, b2, LN_EPS, &mut ln2, &mut st2);
        if let Some(rec) = capture.as_deref_mut() {
            rec.record_activations(&format!("layers.{l}.ffn.w_up"), &ln2);
            if cfg.ffn_kind == FfnKind::Swiglu3 {
                rec.record_activations(&format!("layers.{l}.ffn.w_gate"), &ln2);
            }
        }
        let u = apply_linear(&ln2, ckpt, &format!("layers.{l}.ffn.w_up"), adapters)?;
        let (gate, act) = match cfg.ffn_kind {
            FfnKind::Gelu2 => (None, tensor::gelu(&u)),
            FfnKind::Swiglu3 => {
                let g = apply_linear(&ln2, ckpt, &format!("layers.{l}.ffn.w_gate"), adapters)?;
                let mut act = Tensor::zeros(u.shape());
                for ((av, &uv), &gv) in act
                    .data_mut()
                    .iter_mut()
                    .zip(u.data().iter())
                    .zip(g.data().iter())
                {
                    *av = tensor::silu_scalar(gv) * uv;
                }
                (Some(g), act)
            }
        };
        if let Some(rec) = capture.as_deref_mut() {
            rec.record_activations(&format!("layers.{l}.ffn.w_down"), &act);
        }
        let down = apply_linear(&act, ckpt, &format!("layers.{l}.ffn.w_down"), adapters)?;
        for (hv, dv) in h.data_mut().iter_mut().zip(down.data().iter()) {
            *hv += *dv;
        }
        if let Some(c) = caches.as_mut() {
            c.ln2_stats.push(st2);
            c.ln2_out.push(ln2);
            c.ffn_u.push(u);
            c.ffn_g.push(gate);
            c.ffn_act.push(act);
        }
    }

    // Final norm and logits.
    let gf = ckpt.tensor("final_norm.gamma")?;
    let bf = ckpt.tensor("final_norm.beta")?;
    let mut hn = Tensor::zeros(&[n, d]);
    let mut stf = vec![0.0f32; 2 * n];
    tensor::layer_norm_forward(&h, gf, bf, LN_EPS, &mut hn, &mut stf);
    let logits = tensor::linear(&hn, ckpt.head_weight())?;

    if let Some(rec) = capture.as_deref_mut() {
        rec.add_tokens(n as u64);
    }

    let loss = if want_loss {
        let mut sum = 0.0f64;
        let count = b * (t - 1);
        for bi in 0..b {
            for ti in 0..t - 1 {
                let row = logits.row(bi * t + ti);
                let target = batch.token(bi, ti + 1) as usize;
                sum += tensor::row_nll(row, target)?;
            }
        }
        let mean = sum / count as f64;
        if !mean.is_finite() {
            return Err(CoreError::non_finite("forward loss"));
        }
        Some(mean)
    } else {
        None
    };

    if let Some(c) = caches.as_mut() {
        c.final_input = h;
        c.final_stats = stf;
        c.hn = hn;
    }

    Ok(ForwardArtifacts { loss, logits, caches })
}

/// Mean next-token negative log-likelihood over the batch.
pub fn forward_loss(ckpt: &ModelCheckpoint, batch: &TokenBatch) -> Result<f64> {
    let art = forward_full(ckpt, None, batch, true, false, None)?;
    Ok(art.loss.expect("loss requested"))
}

/// [`forward_loss`] with low-rank adapters applied on top of the base
/// weights.
pub fn forward_loss_with_adapters(
    ckpt: &ModelCheckpoint,
    adapters: &LoraSet,
    batch: &TokenBatch,
) -> Result<f64> {
    let art = forward_full(ckpt, Some(adapters), batch, true, false, None)?;
    Ok(art.loss.expect("loss requested"))
}

/// Forward pass that additionally accumulates per-input-feature activation
/// statistics for every prunable weight. The returned loss is bit-identical
/// to [`forward_loss`] on the same inputs.
pub fn forward_capture(ckpt: &ModelCheckpoint, batch: &TokenBatch) -> Result<(f64, ActivationRecord)> {
    let mut record = ActivationRecord::new();
    let art = forward_full(ckpt, None, batch, true, false, Some(&mut record))?;
    Ok((art.loss.expect("loss requested"), record))
}

/// Raw logits for one sequence, shape `[len × vocab]`.
pub fn forward_logits(ckpt: &ModelCheckpoint, tokens: &[u32]) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(CoreError::data("cannot run the model on an empty sequence"));
    }
    let batch = TokenBatch::new(1, tokens.len(), tokens.to_vec())?;
    let art = forward_full(ckpt, None, &batch, false, false, None)?;
    Ok(art.logits)
}

/// Greedy decoding: repeatedly append the argmax next token (ties resolve to
/// the lower token id) until `max_new` tokens are added or the context
/// window is full.
pub fn generate_greedy(ckpt: &ModelCheckpoint, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(CoreError::data("generation needs a non-empty prompt"));
    }
    if prompt.len() > ckpt.config.max_seq_len {
        return Err(CoreError::data(format!(
            "prompt length {} exceeds the context window {}",
            prompt.len(),
            ckpt.config.max_seq_len
        )));
    }
    let mut out = prompt.to_vec();
    for _ in 0..max_new {
        if out.len() >= ckpt.config.max_seq_len {
            break;
        }
        let logits = forward_logits(ckpt, &out)?;
        let last = logits.row(logits.rows() - 1);
        out.push(tensor::argmax(last) as u32);
    }
    Ok(out)
}
