//! The toy causal decoder: configuration, checkpoint container, parameter
//! initialization, and closed-form size/compute accounting.
//!
//! Architecture: pre-norm transformer decoder with learned absolute
//! positional embeddings, multi-head causal self-attention without biases,
//! and either a 2-matrix GELU FFN or a 3-matrix SwiGLU FFN. Pruning shrinks
//! per-layer head counts and FFN widths, so the checkpoint stores an explicit
//! shape entry per layer alongside the base configuration.
//!
//! # Tensor naming scheme
//!
//! Every trainable tensor has a canonical dotted name; layer indices are the
//! `{i}` position. Weight matrices are stored row-major as
//! `[out_features × in_features]`.
//!
//! | name | shape |
//! |------|-------|
//! | `embed.tok` | `[vocab_size, d_model]` |
//! | `embed.pos` | `[max_seq_len, d_model]` |
//! | `layers.{i}.attn_norm.gamma` / `.beta` | `[d_model]` |
//! | `layers.{i}.attn.wq` / `.wk` / `.wv` | `[heads_i·d_head, d_model]` |
//! | `layers.{i}.attn.wo` | `[d_model, heads_i·d_head]` |
//! | `layers.{i}.ffn_norm.gamma` / `.beta` | `[d_model]` |
//! | `layers.{i}.ffn.w_up` / `.w_gate` | `[d_ff_i, d_model]` (`w_gate` only for swiglu3) |
//! | `layers.{i}.ffn.w_down` | `[d_model, d_ff_i]` |
//! | `final_norm.gamma` / `.beta` | `[d_model]` |
//! | `head.out` | `[vocab_size, d_model]` (absent when embeddings are tied) |
//!
//! Attention head `h` of layer `i` owns rows `[h·d_head, (h+1)·d_head)` of
//! `wq`/`wk`/`wv` and the same column range of `wo`; FFN channel `c` owns row
//! `c` of `w_up` (and `w_gate`) and column `c` of `w_down`.

mod backward;
mod forward;

pub use backward::{backward, backward_with_adapters, AdapterGradients, GradientBuffers};
pub use forward::{
    forward_capture, forward_logits, forward_loss, forward_loss_with_adapters, generate_greedy,
    ActivationRecord, TokenBatch,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Feed-forward block variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    /// Two matrices: `w_down · gelu(w_up · x)`.
    Gelu2,
    /// Three matrices: `w_down · (silu(w_gate·x) ⊙ (w_up·x))`.
    Swiglu3,
}

impl FfnKind {
    /// Matrices per FFN channel group.
    pub fn matrices(self) -> usize {
        match self {
            FfnKind::Gelu2 => 2,
            FfnKind::Swiglu3 => 3,
        }
    }
}

/// Static architecture description (pre-pruning, uniform across layers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub ffn_kind: FfnKind,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Head dimension; fixed even after heads are removed.
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Check internal consistency.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(CoreError::config("vocab_size must be at least 2"));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(CoreError::config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Per-layer shape record; starts uniform, shrinks under pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerShape {
    pub n_heads: usize,
    pub d_ff: usize,
}

/// A complete set of model weights plus the shapes they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub layer_shapes: Vec<LayerShape>,
    tensors: BTreeMap<String, Tensor>,
}

/// Expected `(name, shape)` list in canonical order for the given shapes.
pub fn canonical_tensor_shapes(
    config: &ModelConfig,
    layer_shapes: &[LayerShape],
) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let dh = config.d_head();
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    out.push(("embed.tok".into(), vec![config.vocab_size, d]));
    out.push(("embed.pos".into(), vec![config.max_seq_len, d]));
    for (i, ls) in layer_shapes.iter().enumerate() {
        let attn_w = ls.n_heads * dh;
        out.push((format!("layers.{i}.attn_norm.gamma"), vec![d]));
        out.push((format!("layers.{i}.attn_norm.beta"), vec![d]));
        out.push((format!("layers.{i}.attn.wq"), vec![attn_w, d]));
        out.push((format!("layers.{i}.attn.wk"), vec![attn_w, d]));
        out.push((format!("layers.{i}.attn.wv"), vec![attn_w, d]));
        out.push((format!("layers.{i}.attn.wo"), vec![d, attn_w]));
        out.push((format!("layers.{i}.ffn_norm.gamma"), vec![d]));
        out.push((format!("layers.{i}.ffn_norm.beta"), vec![d]));
        out.push((format!("layers.{i}.ffn.w_up"), vec![ls.d_ff, d]));
        if config.ffn_kind == FfnKind::Swiglu3 {
            out.push((format!("layers.{i}.ffn.w_gate"), vec![ls.d_ff, d]));
        }
        out.push((format!("layers.{i}.ffn.w_down"), vec![d, ls.d_ff]));
    }
    out.push(("final_norm.gamma".into(), vec![d]));
    out.push(("final_norm.beta".into(), vec![d]));
    if !config.tie_embeddings {
        out.push(("head.out".into(), vec![config.vocab_size, d]));
    }
    out
}

/// Standard deviation used for all projection/embedding initialization.
pub const INIT_STD: f32 = 0.02;

/// Epsilon inside every layer-norm variance square root.
pub const LN_EPS: f32 = 1e-5;

impl ModelCheckpoint {
    /// Randomly initialized model: normal(0, 0.02) projections and
    /// embeddings, gamma = 1, beta = 0. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelCheckpoint> {
        config.validate()?;
        let layer_shapes =
            vec![LayerShape { n_heads: config.n_heads, d_ff: config.d_ff }; config.n_layers];
        let mut tensors = BTreeMap::new();
        for (ordinal, (name, shape)) in
            canonical_tensor_shapes(config, &layer_shapes).into_iter().enumerate()
        {
            let tensor = if name.ends_with(".gamma") {
                Tensor::filled(&shape, 1.0)
            } else if name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else {
                let mut rng = RngStream::new(seed, ordinal as u64);
                Tensor::random_normal(&mut rng, &shape, INIT_STD)
            };
            tensors.insert(name, tensor);
        }
        Ok(ModelCheckpoint { config: config.clone(), layer_shapes, tensors })
    }

    /// Assemble a checkpoint from parts, validating every shape.
    pub fn from_parts(
        config: ModelConfig,
        layer_shapes: Vec<LayerShape>,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<ModelCheckpoint> {
        config.validate()?;
        if layer_shapes.len() != config.n_layers {
            return Err(CoreError::config(format!(
                "{} layer shapes for {} layers",
                layer_shapes.len(),
                config.n_layers
            )));
        }
        let expected = canonical_tensor_shapes(&config, &layer_shapes);
        if expected.len() != tensors.len() {
            return Err(CoreError::shape(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => {
                    return Err(CoreError::shape(format!("missing tensor {name}")));
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(CoreError::shape(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )));
                }
                _ => {}
            }
        }
        Ok(ModelCheckpoint { config, layer_shapes, tensors })
    }

    /// Canonical `(name, shape)` list for this checkpoint.
    pub fn canonical_shapes(&self) -> Vec<(String, Vec<usize>)> {
        canonical_tensor_shapes(&self.config, &self.layer_shapes)
    }

    /// Canonical tensor names in enumeration order.
    pub fn canonical_names(&self) -> Vec<String> {
        self.canonical_shapes().into_iter().map(|(n, _)| n).collect()
    }

    /// Borrow a tensor by canonical name.
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CoreError::shape(format!("no tensor named {name}")))
    }

    /// Mutably borrow a tensor by canonical name.
    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| CoreError::shape(format!("no tensor named {name}")))
    }

    /// Iterate `(name, tensor)` pairs in name order.
    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Number of stored tensors.
    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Borrow the `i`-th tensor in name order.
    pub fn tensor_by_ordinal(&self, i: usize) -> Option<(&str, &Tensor)> {
        self.tensors.iter().nth(i).map(|(n, t)| (n.as_str(), t))
    }

    /// Mutably borrow the `i`-th tensor in name order.
    pub fn tensor_by_ordinal_mut(&mut self, i: usize) -> Option<(&str, &mut Tensor)> {
        self.tensors.iter_mut().nth(i).map(|(n, t)| (n.as_str(), t))
    }

    /// The weight matrix producing logits (separate head or tied embedding).
    pub fn head_weight(&self) -> &Tensor {
        if self.config.tie_embeddings {
            self.tensors.get("embed.tok").expect("embed.tok always present")
        } else {
            self.tensors.get("head.out").expect("head.out present when untied")
        }
    }

    /// Names of the prunable weight matrices (attention projections and FFN
    /// matrices), in layer order.
    pub fn prunable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.config.n_layers {
            for suffix in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                out.push(format!("layers.{i}.{suffix}"));
            }
            out.push(format!("layers.{i}.ffn.w_up"));
            if self.config.ffn_kind == FfnKind::Swiglu3 {
                out.push(format!("layers.{i}.ffn.w_gate"));
            }
            out.push(format!("layers.{i}.ffn.w_down"));
        }
        out
    }

    /// Total parameter count (actual shapes, pruning included).
    pub fn param_count(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    /// Multiply-accumulate count for one forward pass at sequence length
    /// `seq_len`, honoring per-layer pruned shapes. See [`count_params_macs`]
    /// for the formula.
    pub fn mac_count(&self, seq_len: usize) -> u64 {
        let t = seq_len as u64;
        let d = self.config.d_model as u64;
        let dh = self.config.d_head() as u64;
        let n_mats = self.config.ffn_kind.matrices() as u64;
        let mut macs = 0u64;
        for ls in &self.layer_shapes {
            let attn_w = ls.n_heads as u64 * dh;
            // q/k/v/o projections
            macs += 4 * t * d * attn_w;
            // causal score and value mixing: sum_i (i+1) per head for each of
            // the two inner products
            macs += ls.n_heads as u64 * dh * t * (t + 1);
            // FFN matrices
            macs += n_mats * t * d * ls.d_ff as u64;
        }
        // output head (tied or not, the matmul happens)
        macs += t * d * self.config.vocab_size as u64;
        macs
    }
}

/// Closed-form parameter and multiply-accumulate counts for a uniform
/// (unpruned) configuration.
///
/// Parameters: token embedding `V·d` + positional embedding `T·d` + per layer
/// (4·d·d attention + n_mats·d·d_ff FFN + 4·d norm parameters) + final norm
/// `2·d` + untied head `V·d`.
///
/// MACs, one forward at length `t`: per layer `4·t·d·d` projections +
/// `H·d_head·t·(t+1)` causal attention inner products + `n_mats·t·d·d_ff`
/// FFN, plus `t·d·V` for the output head. Embedding lookups are additions,
/// not MACs.
pub fn count_params_macs(config: &ModelConfig, seq_len: usize) -> (u64, u64) {
    let layer_shapes =
        vec![LayerShape { n_heads: config.n_heads, d_ff: config.d_ff }; config.n_layers];
    let params: u64 = canonical_tensor_shapes(config, &layer_shapes)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum();
    let probe = ModelCheckpoint {
        config: config.clone(),
        layer_shapes,
        tensors: BTreeMap::new(),
    };
    (params, probe.mac_count(seq_len))
}
