//! Per-weight sensitivity scoring for structured pruning.
//!
//! A scoring criterion turns a checkpoint (plus optional calibration
//! evidence) into one nonnegative score per weight of every prunable
//! projection matrix.  Scores are later aggregated over structure slices
//! (head row/column blocks, FFN channels) by the pruning planner.
//!
//! Supported criteria and the evidence they require:
//!
//! | criterion      | formula per weight `w[i,j]`        | gradients | activations |
//! |----------------|------------------------------------|-----------|-------------|
//! | `magnitude_l1` | `|w|`                              | no        | no          |
//! | `magnitude_l2` | `w^2`                              | no        | no          |
//! | `wanda`        | `|w| * norm_j`                     | no        | yes         |
//! | `taylor_bp`    | `|w * g|` (backprop gradient)      | yes       | no          |
//! | `taylor_zo`    | `|w * g|` (zeroth-order gradient)  | yes       | no          |
//! | `fms_bp`       | `|w * g| * norm_j` (backprop)      | yes       | yes         |
//! | `fms_zo`       | `|w * g| * norm_j` (zeroth-order)  | yes       | yes         |
//!
//! where `norm_j` is the l2 norm of input feature `j` over the calibration
//! tokens fed through the network.  The `_bp`/`_zo` suffix records where
//! the gradient came from; the arithmetic is identical, so feeding both
//! variants the same gradient values yields bitwise-equal scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ActivationRecord, GradientBuffers, ModelCheckpoint};
use crate::tensor::Tensor;
use crate::zo::ZoGradients;

/// Pruning criterion selector. The serialized (config-file) names are the
/// lowercase snake_case variants, e.g. `"fms_zo"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    MagnitudeL1,
    MagnitudeL2,
    Wanda,
    TaylorBp,
    TaylorZo,
    FmsBp,
    FmsZo,
}

impl Criterion {
    /// All criteria, in a stable order (useful for sweeps).
    pub const ALL: [Criterion; 7] = [
        Criterion::MagnitudeL1,
        Criterion::MagnitudeL2,
        Criterion::Wanda,
        Criterion::TaylorBp,
        Criterion::TaylorZo,
        Criterion::FmsBp,
        Criterion::FmsZo,
    ];

    /// Config-file name of the criterion.
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::MagnitudeL1 => "magnitude_l1",
            Criterion::MagnitudeL2 => "magnitude_l2",
            Criterion::Wanda => "wanda",
            Criterion::TaylorBp => "taylor_bp",
            Criterion::TaylorZo => "taylor_zo",
            Criterion::FmsBp => "fms_bp",
            Criterion::FmsZo => "fms_zo",
        }
    }

    /// Parse a config-file name.
    pub fn parse(name: &str) -> Result<Criterion> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| {
                CoreError::config(format!(
                    "unknown criterion '{name}' (expected one of: {})",
                    Criterion::ALL.map(|c| c.name()).join(", ")
                ))
            })
    }

    /// Does scoring require per-weight gradients?
    pub fn needs_gradients(&self) -> bool {
        matches!(
            self,
            Criterion::TaylorBp | Criterion::TaylorZo | Criterion::FmsBp | Criterion::FmsZo
        )
    }

    /// Does scoring require calibration activation norms?
    pub fn needs_activations(&self) -> bool {
        matches!(self, Criterion::Wanda | Criterion::FmsBp | Criterion::FmsZo)
    }

    /// Should the gradients come from the zeroth-order estimator?
    pub fn uses_zo_gradients(&self) -> bool {
        matches!(self, Criterion::TaylorZo | Criterion::FmsZo)
    }

    /// Should the gradients come from backpropagation?
    pub fn uses_backprop_gradients(&self) -> bool {
        matches!(self, Criterion::TaylorBp | Criterion::FmsBp)
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Uniform view over gradient producers: exact backprop buffers and
/// replayed zeroth-order estimates both yield per-weight values in f64.
pub trait GradientSource {
    /// Per-weight gradient values for `name`, flattened row-major, in the
    /// same element order as the weight tensor.
    fn grad_elements(&self, name: &str) -> Result<Vec<f64>>;

    /// Short human-readable description of where the gradients came from,
    /// embedded in score provenance strings.
    fn describe(&self) -> String;
}

impl GradientSource for GradientBuffers {
    fn grad_elements(&self, name: &str) -> Result<Vec<f64>> {
        let g = self.grad(name)?;
        Ok(g.data().iter().map(|&v| v as f64).collect())
    }

    fn describe(&self) -> String {
        "backprop".to_string()
    }
}

impl GradientSource for ZoGradients {
    fn grad_elements(&self, name: &str) -> Result<Vec<f64>> {
        self.grad(name)
    }

    fn describe(&self) -> String {
        let s = self.spec();
        format!(
            "zo(seed={}, epsilon={}, samples={}, distribution={}, clamp={})",
            s.base_seed,
            s.epsilon,
            s.n_samples,
            match s.distribution {
                crate::rng::Distribution::Gaussian => "gaussian",
                crate::rng::Distribution::Rademacher => "rademacher",
            },
            s.clamp
        )
    }
}

/// Per-input-feature l2 activation norms for each prunable matrix,
/// computed from a calibration [`ActivationRecord`].
#[derive(Debug, Clone)]
pub struct ActivationNorms {
    norms: BTreeMap<String, Vec<f64>>,
    token_count: u64,
}

impl ActivationNorms {
    /// Norm vector for the inputs of `name` (length = `in_features`).
    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.norms
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| {
                CoreError::data(format!("no activation norms recorded for tensor '{name}'"))
            })
    }

    /// Names with recorded norms, sorted.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.norms.keys().map(|s| s.as_str())
    }

    /// Number of calibration tokens the norms were accumulated over.
    pub fn token_count(&self) -> u64 {
        self.token_count
    }
}

/// Reduce accumulated squared sums to per-feature l2 norms
/// (`norm_j = sqrt(sum_t x[t][j]^2)` over all calibration tokens `t`).
///
/// Fails on an empty record: scoring criteria that multiply by activation
/// norms are meaningless without calibration data.
pub fn activation_norms(record: &ActivationRecord) -> Result<ActivationNorms> {
    if record.is_empty() || record.token_count() == 0 {
        return Err(CoreError::data(
            "activation record is empty; run a calibration forward pass with capture first",
        ));
    }
    let mut norms = BTreeMap::new();
    for name in record.names() {
        let sums = record.sq_sums(name)?;
        let mut v = Vec::with_capacity(sums.len());
        for &s in sums {
            if !s.is_finite() || s < 0.0 {
                return Err(CoreError::non_finite(format!(
                    "squared activation sum for '{name}' is invalid ({s})"
                )));
            }
            v.push(s.sqrt());
        }
        norms.insert(name.to_string(), v);
    }
    Ok(ActivationNorms {
        norms,
        token_count: record.token_count(),
    })
}

/// One score tensor per prunable weight matrix, plus provenance describing
/// how the scores were produced (criterion, gradient source, calibration
/// size).  Scores are nonnegative; higher means "more important to keep".
#[derive(Debug, Clone)]
pub struct SensitivityMap {
    pub criterion: Criterion,
    pub tensors: BTreeMap<String, Tensor>,
    pub provenance: String,
}

impl SensitivityMap {
    /// Score tensor for `name`.
    pub fn scores(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CoreError::data(format!("no scores for tensor '{name}'")))
    }

    /// Tensor names with scores, sorted.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }
}

/// A contiguous row or column block of one weight matrix — the unit over
/// which sensitivity scores are aggregated when deciding what to prune.
/// Half-open index ranges; an empty range is rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureSlice {
    Rows { start: usize, end: usize },
    Cols { start: usize, end: usize },
}

impl StructureSlice {
    fn bounds(&self) -> (usize, usize) {
        match *self {
            StructureSlice::Rows { start, end } | StructureSlice::Cols { start, end } => {
                (start, end)
            }
        }
    }
}

/// Sum the scores of one structure slice of one tensor, in f64.
pub fn structure_sum(map: &SensitivityMap, tensor: &str, slice: &StructureSlice) -> Result<f64> {
    let scores = map.scores(tensor)?;
    if scores.rank() != 2 {
        return Err(CoreError::shape(format!(
            "structure slices apply to matrices; '{tensor}' has rank {}",
            scores.rank()
        )));
    }
    let (rows, cols) = (scores.rows(), scores.cols());
    let (start, end) = slice.bounds();
    let limit = match slice {
        StructureSlice::Rows { .. } => rows,
        StructureSlice::Cols { .. } => cols,
    };
    if start >= end {
        return Err(CoreError::shape(format!(
            "empty structure slice [{start}, {end}) on '{tensor}'"
        )));
    }
    if end > limit {
        return Err(CoreError::shape(format!(
            "structure slice [{start}, {end}) out of bounds for '{tensor}' ({rows}x{cols})"
        )));
    }
    let data = scores.data();
    let mut acc = 0.0f64;
    match slice {
        StructureSlice::Rows { .. } => {
            for &v in &data[start * cols..end * cols] {
                acc += v as f64;
            }
        }
        StructureSlice::Cols { .. } => {
            for i in 0..rows {
                let row = &data[i * cols..(i + 1) * cols];
                for &v in &row[start..end] {
                    acc += v as f64;
                }
            }
        }
    }
    Ok(acc)
}

/// Score every prunable matrix of `ckpt` under `criterion`.
///
/// `grads` must be provided for the taylor/fms criteria and `acts` for the
/// wanda/fms criteria; both are ignored (and may be `None`) otherwise.
/// All arithmetic runs in f64 and the result is stored as f32 score
/// tensors with the same shapes as the weights.
pub fn score(
    ckpt: &ModelCheckpoint,
    criterion: Criterion,
    grads: Option<&dyn GradientSource>,
    acts: Option<&ActivationNorms>,
) -> Result<SensitivityMap> {
    if criterion.needs_gradients() && grads.is_none() {
        return Err(CoreError::config(format!(
            "criterion {criterion} requires per-weight gradients"
        )));
    }
    if criterion.needs_activations() && acts.is_none() {
        return Err(CoreError::config(format!(
            "criterion {criterion} requires calibration activation norms"
        )));
    }

    let mut tensors = BTreeMap::new();
    for name in ckpt.prunable_names() {
        let w = ckpt.tensor(&name)?;
        let data = w.data();
        let cols = w.cols();

        let grad_vals = if criterion.needs_gradients() {
            let g = grads.unwrap().grad_elements(&name)?;
            if g.len() != data.len() {
                return Err(CoreError::shape(format!(
                    "gradient for '{name}' has {} elements, weight has {}",
                    g.len(),
                    data.len()
                )));
            }
            Some(g)
        } else {
            None
        };

        let norm_vals = if criterion.needs_activations() {
            let n = acts.unwrap().get(&name)?;
            if n.len() != cols {
                return Err(CoreError::shape(format!(
                    "activation norms for '{name}' cover {} features, weight has {} inputs",
                    n.len(),
                    cols
                )));
            }
            Some(n)
        } else {
            None
        };

        let mut out = Vec::with_capacity(data.len());
        for (idx, &wv) in data.iter().enumerate() {
            let w64 = wv as f64;
            let s = match criterion {
                Criterion::MagnitudeL1 => w64.abs(),
                Criterion::MagnitudeL2 => w64 * w64,
                Criterion::Wanda => w64.abs() * norm_vals.unwrap()[idx % cols],
                Criterion::TaylorBp | Criterion::TaylorZo => {
                    (w64 * grad_vals.as_ref().unwrap()[idx]).abs()
                }
                Criterion::FmsBp | Criterion::FmsZo => {
                    (w64 * grad_vals.as_ref().unwrap()[idx]).abs() * norm_vals.unwrap()[idx % cols]
                }
            };
            if !s.is_finite() {
                return Err(CoreError::non_finite(format!(
                    "score for '{name}' element {idx} is not finite"
                )));
            }
            out.push(s as f32);
        }
        tensors.insert(name.clone(), Tensor::from_vec(w.shape().to_vec(), out)?);
    }

    let mut provenance = format!("criterion={criterion}");
    if let Some(g) = grads.filter(|_| criterion.needs_gradients()) {
        provenance.push_str(&format!(", gradients={}", g.describe()));
    }
    if let Some(a) = acts.filter(|_| criterion.needs_activations()) {
        provenance.push_str(&format!(", calibration_tokens={}", a.token_count()));
    }

    Ok(SensitivityMap {
        criterion,
        tensors,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FfnKind, ModelConfig, TokenBatch};
    use crate::rng::RngStream;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 61,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 12,
            ffn_kind: FfnKind::Gelu2,
            tie_embeddings: true,
        }
    }

    fn toy_model(seed: u64) -> ModelCheckpoint {
        ModelCheckpoint::init(&toy_config(), seed).unwrap()
    }

    fn toy_batch(seed: u64, rows: usize, cols: usize) -> TokenBatch {
        let mut rng = RngStream::new(seed, 77);
        let tokens: Vec<u32> = (0..rows * cols)
            .map(|_| rng.next_below(61) as u32)
            .collect();
        TokenBatch::new(rows, cols, tokens).unwrap()
    }

    /// Gradient source returning a constant for every element, shaped to
    /// match the checkpoint it wraps.
    struct ConstGrads<'a> {
        ckpt: &'a ModelCheckpoint,
        value: f64,
    }
    impl GradientSource for ConstGrads<'_> {
        fn grad_elements(&self, name: &str) -> Result<Vec<f64>> {
            Ok(vec![self.value; self.ckpt.tensor(name)?.numel()])
        }
        fn describe(&self) -> String {
            format!("const({})", self.value)
        }
    }

    fn capture_norms(ckpt: &ModelCheckpoint, batch: &TokenBatch) -> ActivationNorms {
        let (_, rec) = crate::model::forward_capture(ckpt, batch).unwrap();
        activation_norms(&rec).unwrap()
    }

    #[test]
    fn criterion_names_round_trip_through_serde() {
        for c in Criterion::ALL {
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(json, format!("\"{}\"", c.name()));
            let back: Criterion = serde_json::from_str(&json).unwrap();
            assert_eq!(back, c);
            assert_eq!(Criterion::parse(c.name()).unwrap(), c);
        }
        assert!(Criterion::parse("l1").is_err());
    }

    #[test]
    fn requirement_flags_match_the_criterion_table() {
        use Criterion::*;
        for c in [MagnitudeL1, MagnitudeL2] {
            assert!(!c.needs_gradients() && !c.needs_activations());
        }
        assert!(!Wanda.needs_gradients() && Wanda.needs_activations());
        for c in [TaylorBp, TaylorZo] {
            assert!(c.needs_gradients() && !c.needs_activations());
        }
        for c in [FmsBp, FmsZo] {
            assert!(c.needs_gradients() && c.needs_activations());
        }
        assert!(FmsZo.uses_zo_gradients() && !FmsZo.uses_backprop_gradients());
        assert!(FmsBp.uses_backprop_gradients() && !FmsBp.uses_zo_gradients());
        assert!(!MagnitudeL1.uses_zo_gradients() && !MagnitudeL1.uses_backprop_gradients());
    }

    #[test]
    fn missing_evidence_is_a_config_error() {
        let ckpt = toy_model(3);
        let unit = ConstGrads {
            ckpt: &ckpt,
            value: 1.0,
        };
        assert!(score(&ckpt, Criterion::TaylorBp, None, None).is_err());
        assert!(score(&ckpt, Criterion::Wanda, None, None).is_err());
        assert!(score(&ckpt, Criterion::FmsZo, Some(&unit), None).is_err());
        // Magnitude needs nothing.
        assert!(score(&ckpt, Criterion::MagnitudeL1, None, None).is_ok());
    }

    #[test]
    fn magnitude_scores_are_elementwise_abs_and_square() {
        let ckpt = toy_model(4);
        let l1 = score(&ckpt, Criterion::MagnitudeL1, None, None).unwrap();
        let l2 = score(&ckpt, Criterion::MagnitudeL2, None, None).unwrap();
        let name = "layers.0.attn.wq";
        let w = ckpt.tensor(name).unwrap();
        let s1 = l1.scores(name).unwrap();
        let s2 = l2.scores(name).unwrap();
        for i in 0..w.numel() {
            let wv = w.data()[i];
            assert_eq!(s1.data()[i], wv.abs());
            assert_eq!(s2.data()[i], ((wv as f64) * (wv as f64)) as f32);
        }
    }

    #[test]
    fn score_map_covers_exactly_the_prunable_tensors() {
        let ckpt = toy_model(5);
        let map = score(&ckpt, Criterion::MagnitudeL2, None, None).unwrap();
        let mut expected: Vec<String> = ckpt.prunable_names();
        expected.sort(); // map iteration is name-sorted
        let got: Vec<String> = map.names().map(|s| s.to_string()).collect();
        assert_eq!(got, expected);
        for name in map.names() {
            let s = map.scores(name).unwrap();
            assert_eq!(s.shape(), ckpt.tensor(name).unwrap().shape());
            assert!(s.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn fms_hand_example_single_weight() {
        // weight 0.5, gradient -4, input feature norm 2  =>  |0.5 * -4| * 2 = 4.
        // Build a 1x1 "model" by scoring a handcrafted tensor through the
        // same arithmetic path: use a real checkpoint but overwrite one
        // weight and check that element's score.
        let mut ckpt = toy_model(6);
        let name = "layers.0.ffn.w_down";
        ckpt.tensor_mut(name).unwrap().data_mut()[0] = 0.5;

        // Synthesize norms: record one token whose features are all 2.0.
        let mut rec = ActivationRecord::new();
        let cols = ckpt.tensor(name).unwrap().cols();
        for n in ckpt.prunable_names() {
            let c = ckpt.tensor(&n).unwrap().cols();
            rec.record_activations(&n, &Tensor::filled(&[1, c], 2.0));
        }
        rec.add_tokens(1);
        assert_eq!(cols, 24);
        let norms = activation_norms(&rec).unwrap();
        assert_eq!(norms.get(name).unwrap()[0], 2.0);

        let grad = ConstGrads {
            ckpt: &ckpt,
            value: -4.0,
        };
        let map = score(&ckpt, Criterion::FmsBp, Some(&grad), Some(&norms)).unwrap();
        assert_eq!(map.scores(name).unwrap().data()[0], 4.0);
    }

    #[test]
    fn wanda_hand_example_row() {
        // weights row [1, -2], feature norms [3, 1]  =>  scores [3, 2].
        let mut ckpt = toy_model(7);
        let name = "layers.1.attn.wo";
        {
            let w = ckpt.tensor_mut(name).unwrap();
            let row = w.row_mut(0);
            row[0] = 1.0;
            row[1] = -2.0;
        }
        let mut rec = ActivationRecord::new();
        for n in ckpt.prunable_names() {
            let c = ckpt.tensor(&n).unwrap().cols();
            let mut x = Tensor::zeros(&[1, c]);
            x.data_mut()[0] = 3.0;
            x.data_mut()[1] = 1.0;
            rec.record_activations(&n, &x);
        }
        rec.add_tokens(1);
        let norms = activation_norms(&rec).unwrap();
        let map = score(&ckpt, Criterion::Wanda, None, Some(&norms)).unwrap();
        let s = map.scores(name).unwrap();
        assert_eq!(s.data()[0], 3.0);
        assert_eq!(s.data()[1], 2.0);
    }

    #[test]
    fn unit_gradients_make_fms_equal_wanda() {
        // With g == 1 everywhere, |w*g|*norm == |w|*norm, so fms collapses
        // to wanda bit for bit (identical f64 arithmetic path).
        let ckpt = toy_model(8);
        let batch = toy_batch(80, 4, 12);
        let norms = capture_norms(&ckpt, &batch);
        let unit = ConstGrads {
            ckpt: &ckpt,
            value: 1.0,
        };
        let wanda = score(&ckpt, Criterion::Wanda, None, Some(&norms)).unwrap();
        let fms = score(&ckpt, Criterion::FmsBp, Some(&unit), Some(&norms)).unwrap();
        for name in wanda.names() {
            let a = wanda.scores(name).unwrap().data();
            let b = fms.scores(name).unwrap().data();
            assert_eq!(a, b, "criteria disagree on {name}");
        }
    }

    #[test]
    fn identical_gradients_make_bp_and_zo_variants_identical() {
        let ckpt = toy_model(9);
        let batch = toy_batch(81, 4, 12);
        let (_, grads) = crate::model::backward(&ckpt, &batch).unwrap();
        let norms = capture_norms(&ckpt, &batch);
        let a = score(&ckpt, Criterion::FmsBp, Some(&grads), Some(&norms)).unwrap();
        let b = score(&ckpt, Criterion::FmsZo, Some(&grads), Some(&norms)).unwrap();
        for name in a.names() {
            assert_eq!(
                a.scores(name).unwrap().data(),
                b.scores(name).unwrap().data()
            );
        }
        let t1 = score(&ckpt, Criterion::TaylorBp, Some(&grads), None).unwrap();
        let t2 = score(&ckpt, Criterion::TaylorZo, Some(&grads), None).unwrap();
        for name in t1.names() {
            assert_eq!(
                t1.scores(name).unwrap().data(),
                t2.scores(name).unwrap().data()
            );
        }
    }

    #[test]
    fn taylor_scores_match_abs_weight_times_gradient() {
        let ckpt = toy_model(10);
        let batch = toy_batch(82, 4, 12);
        let (_, grads) = crate::model::backward(&ckpt, &batch).unwrap();
        let map = score(&ckpt, Criterion::TaylorBp, Some(&grads), None).unwrap();
        let name = "layers.0.attn.wv";
        let w = ckpt.tensor(name).unwrap().data();
        let g = grads.grad(name).unwrap().data();
        let s = map.scores(name).unwrap().data();
        for i in 0..w.len() {
            let want = ((w[i] as f64) * (g[i] as f64)).abs() as f32;
            assert_eq!(s[i], want);
        }
    }

    #[test]
    fn activation_norms_reduce_squared_sums() {
        let mut rec = ActivationRecord::new();
        rec.record_activations("t", &Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]).unwrap());
        rec.add_tokens(1);
        let norms = activation_norms(&rec).unwrap();
        assert_eq!(norms.get("t").unwrap(), &[3.0, 4.0]);
        assert_eq!(norms.token_count(), 1);

        // Two tokens accumulate: [3,0] and [4,0] -> sqrt(9+16) = 5, 0.
        let mut rec2 = ActivationRecord::new();
        rec2.record_activations(
            "t",
            &Tensor::from_vec(vec![2, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap(),
        );
        rec2.add_tokens(2);
        let norms2 = activation_norms(&rec2).unwrap();
        assert_eq!(norms2.get("t").unwrap(), &[5.0, 0.0]);

        // Empty record is rejected.
        assert!(activation_norms(&ActivationRecord::new()).is_err());
    }

    #[test]
    fn zero_weight_scores_zero_under_every_criterion() {
        let mut ckpt = toy_model(11);
        let name = "layers.0.attn.wk";
        ckpt.tensor_mut(name).unwrap().data_mut()[5] = 0.0;
        let batch = toy_batch(83, 2, 12);
        let norms = capture_norms(&ckpt, &batch);
        let (_, grads) = crate::model::backward(&ckpt, &batch).unwrap();
        for c in Criterion::ALL {
            let map = score(&ckpt, c, Some(&grads), Some(&norms)).unwrap();
            assert_eq!(map.scores(name).unwrap().data()[5], 0.0, "criterion {c}");
        }
    }

    #[test]
    fn structure_sum_rows_cols_and_bounds() {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "m".to_string(),
            Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let map = SensitivityMap {
            criterion: Criterion::MagnitudeL1,
            tensors,
            provenance: String::new(),
        };
        let row0 = StructureSlice::Rows { start: 0, end: 1 };
        let rows_all = StructureSlice::Rows { start: 0, end: 2 };
        let col12 = StructureSlice::Cols { start: 1, end: 3 };
        assert_eq!(structure_sum(&map, "m", &row0).unwrap(), 6.0);
        assert_eq!(structure_sum(&map, "m", &rows_all).unwrap(), 21.0);
        assert_eq!(structure_sum(&map, "m", &col12).unwrap(), 2.0 + 3.0 + 5.0 + 6.0);

        // Additivity over a partition of rows.
        let row1 = StructureSlice::Rows { start: 1, end: 2 };
        let total = structure_sum(&map, "m", &row0).unwrap()
            + structure_sum(&map, "m", &row1).unwrap();
        assert_eq!(total, structure_sum(&map, "m", &rows_all).unwrap());

        // Empty and out-of-bounds slices are rejected.
        assert!(structure_sum(&map, "m", &StructureSlice::Rows { start: 1, end: 1 }).is_err());
        assert!(structure_sum(&map, "m", &StructureSlice::Cols { start: 0, end: 4 }).is_err());
        assert!(structure_sum(&map, "missing", &row0).is_err());
    }

    #[test]
    fn provenance_mentions_criterion_and_sources() {
        let ckpt = toy_model(12);
        let batch = toy_batch(84, 2, 12);
        let norms = capture_norms(&ckpt, &batch);
        let (_, grads) = crate::model::backward(&ckpt, &batch).unwrap();
        let map = score(&ckpt, Criterion::FmsBp, Some(&grads), Some(&norms)).unwrap();
        assert!(map.provenance.contains("fms_bp"));
        assert!(map.provenance.contains("backprop"));
        assert!(map.provenance.contains("calibration_tokens"));
    }
}
