//! Dependency-aware structured pruning: group construction, group scoring,
//! top-(1−p) selection, physical weight slicing, and the one-shot pipeline
//! that ties gradient estimation, scoring, and removal together.
//!
//! A *group* is the smallest removable unit: an attention head couples its
//! row blocks of `wq`/`wk`/`wv` with the matching column block of `wo`
//! (M = 4 structures); an FFN channel couples its `w_up` row (plus the
//! `w_gate` row for the three-matrix variant) with its `w_down` column
//! (M = 2 or 3).  A group's score is the **maximum** of its structures'
//! score sums, and each layer retains its top `ceil((1−p)·n)` groups per
//! kind.  Protected layers keep everything.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::write_atomic;
use crate::error::{CoreError, Result};
use crate::model::{
    backward, forward_capture, FfnKind, LayerShape, ModelCheckpoint, ModelConfig, TokenBatch,
};
use crate::scoring::{
    activation_norms, score, structure_sum, Criterion, GradientSource, SensitivityMap,
    StructureSlice,
};
use crate::tensor::Tensor;
use crate::zo::{estimate_gradients, PerturbSpec};

/// What kind of coupled structure a prune group removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    AttentionHead,
    FfnChannel,
}

impl std::fmt::Display for GroupKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GroupKind::AttentionHead => "attention_head",
            GroupKind::FfnChannel => "ffn_channel",
        })
    }
}

/// One removable group: the coupled tensor slices that must go together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneGroup {
    pub layer: usize,
    pub kind: GroupKind,
    /// Head id or channel id within the layer.
    pub index: usize,
    /// `(tensor name, slice)` pairs; all are removed as a unit.
    pub structures: Vec<(String, StructureSlice)>,
}

/// Enumerate every removable group of an (unpruned) architecture, layer by
/// layer, heads before channels, indices ascending.
pub fn build_groups(config: &ModelConfig) -> Result<Vec<PruneGroup>> {
    config.validate()?;
    let dh = config.d_head();
    let mut groups = Vec::with_capacity(config.n_layers * (config.n_heads + config.d_ff));
    for l in 0..config.n_layers {
        for h in 0..config.n_heads {
            let rows = StructureSlice::Rows {
                start: h * dh,
                end: (h + 1) * dh,
            };
            let cols = StructureSlice::Cols {
                start: h * dh,
                end: (h + 1) * dh,
            };
            groups.push(PruneGroup {
                layer: l,
                kind: GroupKind::AttentionHead,
                index: h,
                structures: vec![
                    (format!("layers.{l}.attn.wq"), rows.clone()),
                    (format!("layers.{l}.attn.wk"), rows.clone()),
                    (format!("layers.{l}.attn.wv"), rows),
                    (format!("layers.{l}.attn.wo"), cols),
                ],
            });
        }
        for c in 0..config.d_ff {
            let row = StructureSlice::Rows {
                start: c,
                end: c + 1,
            };
            let col = StructureSlice::Cols {
                start: c,
                end: c + 1,
            };
            let mut structures = vec![(format!("layers.{l}.ffn.w_up"), row.clone())];
            if config.ffn_kind == FfnKind::Swiglu3 {
                structures.push((format!("layers.{l}.ffn.w_gate"), row));
            }
            structures.push((format!("layers.{l}.ffn.w_down"), col));
            groups.push(PruneGroup {
                layer: l,
                kind: GroupKind::FfnChannel,
                index: c,
                structures,
            });
        }
    }
    Ok(groups)
}

/// A group's sensitivity: the maximum of its structures' score sums.
pub fn group_score(map: &SensitivityMap, group: &PruneGroup) -> Result<f64> {
    if group.structures.is_empty() {
        return Err(CoreError::data(format!(
            "group {} {} in layer {} has no structures",
            group.kind, group.index, group.layer
        )));
    }
    let mut best = f64::NEG_INFINITY;
    for (name, slice) in &group.structures {
        let s = structure_sum(map, name, slice)?;
        best = best.max(s);
    }
    Ok(best)
}

/// Retention decision for one `(layer, kind)` family of groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub layer: usize,
    pub kind: GroupKind,
    /// Groups of this kind in this layer before pruning.
    pub total: usize,
    /// Sorted indices of the groups that survive.
    pub retained: Vec<usize>,
    /// Score of every group, indexed by group index.
    pub scores: Vec<f64>,
}

/// The complete, auditable pruning decision: what is removed where, under
/// which scores and seeds. Serializes to a stable JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrunePlan {
    /// Requested removal ratio `p` in `[0, 1)`.
    pub ratio: f64,
    /// Ranking scope; per-layer per-kind top-(1−p) is the only mode.
    pub scope: String,
    /// Layers exempt from pruning (fully retained).
    pub protected_layers: Vec<usize>,
    /// Seed recorded for auditability (e.g. the gradient-estimation seed).
    pub seed: u64,
    /// How the scores were produced (criterion, gradient source,
    /// calibration sizes).
    pub provenance: String,
    /// One entry per `(layer, kind)`, layer-major, heads before channels.
    pub entries: Vec<PlanEntry>,
}

impl PrunePlan {
    /// Entry for one `(layer, kind)`.
    pub fn entry(&self, layer: usize, kind: GroupKind) -> Option<&PlanEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.kind == kind)
    }

    /// Sorted retained indices for one `(layer, kind)`.
    pub fn retained(&self, layer: usize, kind: GroupKind) -> Option<&[usize]> {
        self.entry(layer, kind).map(|e| e.retained.as_slice())
    }

    /// Does the plan remove anything at all?
    pub fn is_identity(&self) -> bool {
        self.entries.iter().all(|e| e.retained.len() == e.total)
    }
}

/// `ceil((1−p)·n)` with a tiny slack against float dust (e.g. `0.7·10`
/// evaluating to `7.000000000000001` must retain 7, not 8), clamped so at
/// least one group always survives.
fn retention_count(p: f64, n: usize) -> usize {
    let k = ((1.0 - p) * n as f64 - 1e-9).ceil();
    (k.max(1.0)) as usize
}

/// Default protected layers at toy depth: the first and the last layer.
/// (Deeper models warrant wider aprons; the ratio sweep reports let you
/// choose.)
pub fn default_protected(n_layers: usize) -> Vec<usize> {
    if n_layers <= 1 {
        vec![0]
    } else {
        vec![0, n_layers - 1]
    }
}

/// Rank groups per `(layer, kind)` and retain the top `ceil((1−p)·n)` by
/// score (ties keep the lower index); protected layers retain everything.
/// `scores[i]` belongs to `groups[i]`.
pub fn select(
    groups: &[PruneGroup],
    scores: &[f64],
    p: f64,
    protected: &[usize],
) -> Result<PrunePlan> {
    if !(0.0..1.0).contains(&p) {
        return Err(CoreError::config(format!(
            "prune ratio must lie in [0, 1), got {p}"
        )));
    }
    if groups.len() != scores.len() {
        return Err(CoreError::config(format!(
            "{} groups but {} scores",
            groups.len(),
            scores.len()
        )));
    }
    if groups.is_empty() {
        return Err(CoreError::config("no groups to select from"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(CoreError::non_finite(format!(
            "score of group {} {} in layer {} is not finite",
            groups[i].kind, groups[i].index, groups[i].layer
        )));
    }
    let max_layer = groups.iter().map(|g| g.layer).max().unwrap();
    let protected_set: BTreeSet<usize> = protected.iter().copied().collect();
    if let Some(&bad) = protected_set.iter().find(|&&l| l > max_layer) {
        return Err(CoreError::config(format!(
            "protected layer {bad} does not exist (deepest layer is {max_layer})"
        )));
    }

    let mut families: BTreeMap<(usize, GroupKind), Vec<(usize, f64)>> = BTreeMap::new();
    for (g, &s) in groups.iter().zip(scores) {
        families
            .entry((g.layer, g.kind))
            .or_default()
            .push((g.index, s));
    }

    let mut entries = Vec::with_capacity(families.len());
    for ((layer, kind), mut members) in families {
        members.sort_by_key(|&(idx, _)| idx);
        let total = members.len();
        for (pos, &(idx, _)) in members.iter().enumerate() {
            if idx != pos {
                return Err(CoreError::config(format!(
                    "group indices for {kind} in layer {layer} are not contiguous from zero"
                )));
            }
        }
        let score_by_index: Vec<f64> = members.iter().map(|&(_, s)| s).collect();
        let retained = if protected_set.contains(&layer) {
            (0..total).collect::<Vec<_>>()
        } else {
            let keep = retention_count(p, total);
            let mut ranked: Vec<usize> = (0..total).collect();
            // Highest score first; equal scores keep the lower index.
            ranked.sort_by(|&a, &b| {
                score_by_index[b]
                    .partial_cmp(&score_by_index[a])
                    .expect("scores validated finite")
                    .then(a.cmp(&b))
            });
            let mut kept: Vec<usize> = ranked.into_iter().take(keep).collect();
            kept.sort_unstable();
            kept
        };
        entries.push(PlanEntry {
            layer,
            kind,
            total,
            retained,
            scores: score_by_index,
        });
    }
    // Layer-major, heads before channels (AttentionHead < FfnChannel).
    entries.sort_by_key(|e| (e.layer, e.kind));

    Ok(PrunePlan {
        ratio: p,
        scope: "per_layer".to_string(),
        protected_layers: protected_set.into_iter().collect(),
        seed: 0,
        provenance: String::new(),
        entries,
    })
}

/// Copy the row blocks `[i·unit, (i+1)·unit)` of `kept` indices.
fn take_row_blocks(t: &Tensor, unit: usize, kept: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut out = Tensor::zeros(&[kept.len() * unit, cols]);
    for (j, &i) in kept.iter().enumerate() {
        for r in 0..unit {
            out.row_mut(j * unit + r).copy_from_slice(t.row(i * unit + r));
        }
    }
    out
}

/// Copy the column blocks `[i·unit, (i+1)·unit)` of `kept` indices.
fn take_col_blocks(t: &Tensor, unit: usize, kept: &[usize]) -> Tensor {
    let rows = t.rows();
    let mut out = Tensor::zeros(&[rows, kept.len() * unit]);
    for r in 0..rows {
        let src = t.row(r);
        let dst = out.row_mut(r);
        for (j, &i) in kept.iter().enumerate() {
            dst[j * unit..(j + 1) * unit].copy_from_slice(&src[i * unit..(i + 1) * unit]);
        }
    }
    out
}

fn validate_entry(e: &PlanEntry, expect_total: usize) -> Result<()> {
    if e.total != expect_total {
        return Err(CoreError::shape(format!(
            "plan entry for {} in layer {} counts {} groups, checkpoint has {}",
            e.kind, e.layer, e.total, expect_total
        )));
    }
    if e.retained.is_empty() {
        return Err(CoreError::shape(format!(
            "plan retains no {} groups in layer {}",
            e.kind, e.layer
        )));
    }
    let ascending = e.retained.windows(2).all(|w| w[0] < w[1]);
    if !ascending || *e.retained.last().unwrap() >= e.total {
        return Err(CoreError::shape(format!(
            "retained {} indices in layer {} must be strictly ascending and below {}",
            e.kind, e.layer, e.total
        )));
    }
    if e.scores.len() != e.total {
        return Err(CoreError::shape(format!(
            "plan entry for {} in layer {} carries {} scores for {} groups",
            e.kind, e.layer, e.scores.len(), e.total
        )));
    }
    Ok(())
}

/// Materialize a plan: slice every affected weight matrix, shrink the
/// per-layer shape records, and return a fresh checkpoint (the input is
/// untouched). A plan that retains everything reproduces the input
/// bit for bit.
pub fn apply_plan(ckpt: &ModelCheckpoint, plan: &PrunePlan) -> Result<ModelCheckpoint> {
    let config = ckpt.config.clone();
    let dh = config.d_head();
    let mut new_shapes = Vec::with_capacity(config.n_layers);
    let mut kept_heads: Vec<&[usize]> = Vec::with_capacity(config.n_layers);
    let mut kept_channels: Vec<&[usize]> = Vec::with_capacity(config.n_layers);

    for l in 0..config.n_layers {
        let heads = plan.entry(l, GroupKind::AttentionHead).ok_or_else(|| {
            CoreError::shape(format!("plan has no attention_head entry for layer {l}"))
        })?;
        let channels = plan.entry(l, GroupKind::FfnChannel).ok_or_else(|| {
            CoreError::shape(format!("plan has no ffn_channel entry for layer {l}"))
        })?;
        validate_entry(heads, ckpt.layer_shapes[l].n_heads)?;
        validate_entry(channels, ckpt.layer_shapes[l].d_ff)?;
        new_shapes.push(LayerShape {
            n_heads: heads.retained.len(),
            d_ff: channels.retained.len(),
        });
        kept_heads.push(&heads.retained);
        kept_channels.push(&channels.retained);
    }
    if plan.entries.len() != 2 * config.n_layers {
        return Err(CoreError::shape(format!(
            "plan has {} entries for a {}-layer model",
            plan.entries.len(),
            config.n_layers
        )));
    }

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in ckpt.tensors() {
        let sliced = slice_for_plan(name, t, &config, dh, &kept_heads, &kept_channels);
        tensors.insert(name.clone(), sliced);
    }
    ModelCheckpoint::from_parts(config, new_shapes, tensors)
}

fn slice_for_plan(
    name: &str,
    t: &Tensor,
    config: &ModelConfig,
    dh: usize,
    kept_heads: &[&[usize]],
    kept_channels: &[&[usize]],
) -> Tensor {
    let parts: Vec<&str> = name.split('.').collect();
    if parts.len() == 4 && parts[0] == "layers" {
        if let Ok(l) = parts[1].parse::<usize>() {
            let full_heads = kept_heads[l].len() == config.n_heads
                && kept_heads[l].iter().enumerate().all(|(i, &h)| i == h);
            let full_channels = kept_channels[l].len() == config.d_ff
                && kept_channels[l].iter().enumerate().all(|(i, &c)| i == c);
            match (parts[2], parts[3]) {
                ("attn", "wq" | "wk" | "wv") if !full_heads => {
                    return take_row_blocks(t, dh, kept_heads[l]);
                }
                ("attn", "wo") if !full_heads => {
                    return take_col_blocks(t, dh, kept_heads[l]);
                }
                ("ffn", "w_up" | "w_gate") if !full_channels => {
                    return take_row_blocks(t, 1, kept_channels[l]);
                }
                ("ffn", "w_down") if !full_channels => {
                    return take_col_blocks(t, 1, kept_channels[l]);
                }
                _ => {}
            }
        }
    }
    t.clone()
}

/// The one-shot pipeline: estimate gradients (when the criterion needs
/// them), capture calibration activations (when it needs those), score
/// every prunable weight, rank groups, and slice the model. Returns the
/// auditable plan and the pruned checkpoint; the input checkpoint is used
/// for in-place perturbation during gradient estimation and restored
/// before scoring.
///
/// `grad_batch` feeds the gradient stage (perturbation or backprop);
/// `act_batch` feeds the activation-norm capture — they may differ in
/// size, mirroring the cheap-gradients/cheap-activations split.
pub fn run_minillm(
    ckpt: &mut ModelCheckpoint,
    grad_batch: &TokenBatch,
    act_batch: &TokenBatch,
    spec: &PerturbSpec,
    criterion: Criterion,
    p: f64,
    protected: &[usize],
) -> Result<(PrunePlan, ModelCheckpoint)> {
    let (plan, pruned, _) =
        run_minillm_traced(ckpt, grad_batch, act_batch, spec, criterion, p, protected)?;
    Ok((plan, pruned))
}

/// [`run_minillm`], additionally returning the per-weight sensitivity map
/// so callers can persist the scores that justified the plan.
pub fn run_minillm_traced(
    ckpt: &mut ModelCheckpoint,
    grad_batch: &TokenBatch,
    act_batch: &TokenBatch,
    spec: &PerturbSpec,
    criterion: Criterion,
    p: f64,
    protected: &[usize],
) -> Result<(PrunePlan, ModelCheckpoint, SensitivityMap)> {
    let uniform = ckpt
        .layer_shapes
        .iter()
        .all(|ls| ls.n_heads == ckpt.config.n_heads && ls.d_ff == ckpt.config.d_ff);
    if !uniform {
        return Err(CoreError::config(
            "checkpoint is already pruned; the pipeline is one-shot and scores a uniform model",
        ));
    }

    let zo_store;
    let bp_store;
    let grads: Option<&dyn GradientSource> = if criterion.uses_zo_gradients() {
        zo_store = estimate_gradients(ckpt, grad_batch, spec)?;
        Some(&zo_store)
    } else if criterion.uses_backprop_gradients() {
        let (_, g) = backward(ckpt, grad_batch)?;
        bp_store = g;
        Some(&bp_store)
    } else {
        None
    };

    let acts = if criterion.needs_activations() {
        let (_, record) = forward_capture(ckpt, act_batch)?;
        Some(activation_norms(&record)?)
    } else {
        None
    };

    let map = score(ckpt, criterion, grads, acts.as_ref())?;
    let groups = build_groups(&ckpt.config)?;
    let scores: Vec<f64> = groups
        .iter()
        .map(|g| group_score(&map, g))
        .collect::<Result<_>>()?;
    let mut plan = select(&groups, &scores, p, protected)?;
    plan.seed = spec.base_seed;
    plan.provenance = map.provenance.clone();
    let pruned = apply_plan(ckpt, &plan)?;
    Ok((plan, pruned, map))
}

/// Overlap of two retained-index sets as a percentage of the first:
/// `|a ∩ b| / |a| · 100`. Duplicates are ignored (set semantics).
pub fn channel_similarity(a: &[usize], b: &[usize]) -> Result<f64> {
    let a_set: BTreeSet<usize> = a.iter().copied().collect();
    if a_set.is_empty() {
        return Err(CoreError::data(
            "similarity is undefined for an empty retained set",
        ));
    }
    let b_set: BTreeSet<usize> = b.iter().copied().collect();
    let hits = a_set.intersection(&b_set).count();
    Ok(100.0 * hits as f64 / a_set.len() as f64)
}

/// Write a plan as pretty-printed JSON (atomic rename).
pub fn save_plan(plan: &PrunePlan, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(plan)
        .map_err(|e| CoreError::format(format!("encoding plan: {e}")))?;
    write_atomic(path, &json)
}

/// Load a plan saved by [`save_plan`].
pub fn load_plan(path: &Path) -> Result<PrunePlan> {
    let bytes = fs::read(path)
        .map_err(|e| CoreError::io(format!("reading {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CoreError::format(format!("parsing {}: {e}", path.display())))
}
