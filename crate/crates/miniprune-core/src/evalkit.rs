//! Perplexity evaluation over fixed non-overlapping context windows, and
//! the comparison harness that sweeps criteria × ratios × seeds through
//! prune → optional recovery → evaluate and tabulates the results.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{write_atomic, Corpus};
use crate::error::{CoreError, Result};
use crate::model::{forward_loss, ModelCheckpoint, TokenBatch};
use crate::pruner::run_minillm;
use crate::recovery::{attach_lora, merge_lora, train_recovery, LoraSpec, TrainConfig};
use crate::scoring::Criterion;
use crate::zo::PerturbSpec;

/// Summary of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub context_length: usize,
    /// exp(mean next-token NLL); always ≥ 1.
    pub perplexity: f64,
    pub param_count: u64,
    /// Forward-pass multiply-accumulates at `context_length`.
    pub mac_count: u64,
    pub wall_time_s: f64,
}

/// Perplexity over non-overlapping windows of exactly `context_length`
/// tokens (the trailing partial window is dropped). Each window scores its
/// `context_length − 1` next-token predictions; the result is the exp of
/// the mean NLL across every scored position.
pub fn perplexity(
    ckpt: &ModelCheckpoint,
    tokens: &[u32],
    context_length: usize,
) -> Result<f64> {
    if context_length < 2 {
        return Err(CoreError::config(format!(
            "context length must be at least 2 to score a prediction, got {context_length}"
        )));
    }
    if context_length > ckpt.config.max_seq_len {
        return Err(CoreError::config(format!(
            "context length {} exceeds the model maximum {}",
            context_length, ckpt.config.max_seq_len
        )));
    }
    if tokens.is_empty() {
        return Err(CoreError::data("cannot evaluate an empty token stream"));
    }
    let n_windows = tokens.len() / context_length;
    if n_windows == 0 {
        return Err(CoreError::data(format!(
            "token stream of {} is shorter than one {}-token context window",
            tokens.len(),
            context_length
        )));
    }
    // One forward per window, summed in window order: the mean is then
    // exactly independent of how the stream was split into evaluation
    // calls at window boundaries.
    let scored_per_window = (context_length - 1) as f64;
    let mut total_nll = 0.0f64;
    for w in 0..n_windows {
        let window = &tokens[w * context_length..(w + 1) * context_length];
        let batch = TokenBatch::new(1, context_length, window.to_vec())?;
        let mean_nll = forward_loss(ckpt, &batch)
            .map_err(|e| e.with_context(format!("evaluation window {w}")))?;
        total_nll += mean_nll * scored_per_window;
    }
    let mean = total_nll / (n_windows as f64 * scored_per_window);
    Ok(mean.exp())
}

/// Evaluate and wrap the result with identity, size, and timing columns.
pub fn evaluate(
    ckpt: &ModelCheckpoint,
    tokens: &[u32],
    context_length: usize,
    model_id: &str,
    dataset_id: &str,
) -> Result<EvalReport> {
    let start = Instant::now();
    let ppl = perplexity(ckpt, tokens, context_length)?;
    Ok(EvalReport {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        context_length,
        perplexity: ppl,
        param_count: ckpt.param_count(),
        mac_count: ckpt.mac_count(context_length),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Recovery budget applied identically to every grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverArm {
    pub lora: LoraSpec,
    pub train: TrainConfig,
}

/// The comparison grid: every (criterion, ratio, seed) cell runs
/// prune → optional recovery → perplexity on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSpec {
    pub criteria: Vec<Criterion>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub context_length: usize,
    /// Layers exempt from pruning.
    pub protected: Vec<usize>,
    /// Gradient-estimation settings; each cell offsets the seed by its own.
    pub perturb: PerturbSpec,
    /// Calibration sequences for the gradient stage (few but full-length).
    pub grad_calib_sequences: usize,
    /// Calibration sequences for the activation stage (cheap, so many).
    pub act_calib_sequences: usize,
    /// Cap on validation tokens scored per cell (`None` = the whole split).
    pub eval_tokens: Option<usize>,
    /// When set, every cell recovers with this exact budget before eval.
    pub recover: Option<RecoverArm>,
}

impl Default for CompareSpec {
    fn default() -> Self {
        CompareSpec {
            criteria: vec![Criterion::MagnitudeL2, Criterion::Wanda, Criterion::FmsZo],
            ratios: vec![0.3],
            seeds: vec![0, 1, 2],
            context_length: 128,
            protected: Vec::new(),
            perturb: PerturbSpec::default(),
            grad_calib_sequences: 10,
            act_calib_sequences: 128,
            eval_tokens: None,
            recover: None,
        }
    }
}

impl CompareSpec {
    pub fn validate(&self) -> Result<()> {
        if self.criteria.is_empty() || self.ratios.is_empty() || self.seeds.is_empty() {
            return Err(CoreError::config(
                "the comparison grid needs at least one criterion, ratio, and seed",
            ));
        }
        if self.grad_calib_sequences == 0 || self.act_calib_sequences == 0 {
            return Err(CoreError::config(
                "calibration batches need at least one sequence",
            ));
        }
        self.perturb.validate()?;
        if let Some(arm) = &self.recover {
            arm.train.validate()?;
        }
        Ok(())
    }
}

/// One grid cell's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRow {
    pub criterion: Criterion,
    pub ratio: f64,
    pub seed: u64,
    pub perplexity: f64,
    pub param_count: u64,
    pub mac_count: u64,
    pub recovered: bool,
    pub wall_time_s: f64,
}

/// Draw one calibration batch of `rows` full-context windows from the
/// training split.
fn calibration_batch(corpus: &Corpus, rows: usize, max_seq_len: usize, seed: u64) -> Result<TokenBatch> {
    let seq_len = max_seq_len
        .checked_sub(1)
        .filter(|&s| s > 0)
        .ok_or_else(|| CoreError::config("calibration needs a context of at least 2"))?;
    let mut batches = corpus.train_batches(rows, seq_len, seed).map_err(|e| {
        e.with_context("drawing calibration sequences from the training split")
    })?;
    batches
        .next()
        .ok_or_else(|| CoreError::data("training split yields no calibration batch"))
}

/// Run the full criterion × ratio × seed grid. Row order is
/// criterion-major, then ratio, then seed; cells are independent and
/// deterministic given the spec's seeds.
pub fn compare_criteria(
    base: &ModelCheckpoint,
    corpus: &Corpus,
    spec: &CompareSpec,
) -> Result<Vec<CompareRow>> {
    spec.validate()?;
    let val = corpus.val_tokens();
    let eval_slice = match spec.eval_tokens {
        Some(cap) => &val[..cap.min(val.len())],
        None => val,
    };
    let max_seq_len = base.config.max_seq_len;

    let mut rows = Vec::with_capacity(spec.criteria.len() * spec.ratios.len() * spec.seeds.len());
    for &criterion in &spec.criteria {
        for &ratio in &spec.ratios {
            for &seed in &spec.seeds {
                let start = Instant::now();
                let mut work = base.clone();
                let grad_batch =
                    calibration_batch(corpus, spec.grad_calib_sequences, max_seq_len, seed)?;
                let act_batch = calibration_batch(
                    corpus,
                    spec.act_calib_sequences,
                    max_seq_len,
                    seed.wrapping_add(0x9e37),
                )?;
                let mut perturb = spec.perturb.clone();
                perturb.base_seed = perturb.base_seed.wrapping_add(seed);
                let (_plan, mut pruned) = run_minillm(
                    &mut work,
                    &grad_batch,
                    &act_batch,
                    &perturb,
                    criterion,
                    ratio,
                    &spec.protected,
                )
                .map_err(|e| {
                    e.with_context(format!("cell {criterion} p={ratio} seed={seed}"))
                })?;
                if let Some(arm) = &spec.recover {
                    let targets = pruned.prunable_names();
                    let mut lora_spec = arm.lora.clone();
                    lora_spec.seed = lora_spec.seed.wrapping_add(seed);
                    let mut train_cfg = arm.train.clone();
                    train_cfg.seed = train_cfg.seed.wrapping_add(seed);
                    let mut set = attach_lora(&pruned, &targets, &lora_spec)?;
                    train_recovery(&pruned, &mut set, corpus, &train_cfg).map_err(|e| {
                        e.with_context(format!(
                            "recovering cell {criterion} p={ratio} seed={seed}"
                        ))
                    })?;
                    merge_lora(&mut pruned, &mut set)?;
                }
                let ppl = perplexity(&pruned, eval_slice, spec.context_length)?;
                rows.push(CompareRow {
                    criterion,
                    ratio,
                    seed,
                    perplexity: ppl,
                    param_count: pruned.param_count(),
                    mac_count: pruned.mac_count(spec.context_length),
                    recovered: spec.recover.is_some(),
                    wall_time_s: start.elapsed().as_secs_f64(),
                });
            }
        }
    }
    Ok(rows)
}

/// One JSON object per line, in row order.
pub fn write_report_jsonl(rows: &[CompareRow], path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| CoreError::format(format!("encoding report row: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Fixed-width text rendering: a detail block (one line per cell) followed
/// by a criterion × ratio matrix of seed-averaged perplexities.
pub fn render_report_table(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>6} {:>6} {:>12} {:>12} {:>14} {:>10} {:>8}\n",
        "criterion", "ratio", "seed", "ppl", "params", "macs", "recovered", "time_s"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>6.2} {:>6} {:>12.4} {:>12} {:>14} {:>10} {:>8.2}\n",
            r.criterion.name(),
            r.ratio,
            r.seed,
            r.perplexity,
            r.param_count,
            r.mac_count,
            if r.recovered { "yes" } else { "no" },
            r.wall_time_s
        ));
    }

    // Seed-averaged matrix, criteria down the side, ratios across.
    let mut criteria: Vec<Criterion> = Vec::new();
    let mut ratios: Vec<f64> = Vec::new();
    for r in rows {
        if !criteria.contains(&r.criterion) {
            criteria.push(r.criterion);
        }
        if !ratios.iter().any(|&p| p == r.ratio) {
            ratios.push(r.ratio);
        }
    }
    out.push_str("\nmean perplexity over seeds\n");
    out.push_str(&format!("{:<14}", "criterion"));
    for p in &ratios {
        out.push_str(&format!(" {:>10}", format!("p={p:.2}")));
    }
    out.push('\n');
    for c in &criteria {
        out.push_str(&format!("{:<14}", c.name()));
        for p in &ratios {
            let cell: Vec<f64> = rows
                .iter()
                .filter(|r| r.criterion == *c && r.ratio == *p)
                .map(|r| r.perplexity)
                .collect();
            if cell.is_empty() {
                out.push_str(&format!(" {:>10}", "-"));
            } else {
                let mean = cell.iter().sum::<f64>() / cell.len() as f64;
                out.push_str(&format!(" {mean:>10.4}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Write the rendered table.
pub fn write_report_text(rows: &[CompareRow], path: &std::path::Path) -> Result<()> {
    write_atomic(path, render_report_table(rows).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic_text;
    use crate::model::{FfnKind, ModelConfig};
    use crate::rng::RngStream;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 256,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 17,
            ffn_kind: FfnKind::Gelu2,
            tie_embeddings: true,
        }
    }

    fn random_tokens(n: usize, vocab: u64, seed: u64) -> Vec<u32> {
        let mut rng = RngStream::new(seed, 1);
        (0..n).map(|_| rng.next_below(vocab) as u32).collect()
    }

    #[test]
    fn uniform_logits_score_at_vocabulary_perplexity() {
        let mut ckpt = ModelCheckpoint::init(&tiny_config(), 0).unwrap();
        // Zero the embeddings: every residual stream stays exactly zero
        // through the pre-norm blocks, so the logits are uniform.
        for name in ["embed.tok", "embed.pos"] {
            ckpt.tensor_mut(name).unwrap().data_mut().fill(0.0);
        }
        let tokens = random_tokens(17 * 24, 256, 4);
        let ppl = perplexity(&ckpt, &tokens, 17).unwrap();
        assert!(
            (ppl / 256.0 - 1.0).abs() < 1e-3,
            "uniform model scored {ppl}, expected 256"
        );
    }

    #[test]
    fn a_single_window_matches_the_forward_loss_exactly() {
        let ckpt = ModelCheckpoint::init(&tiny_config(), 1).unwrap();
        let tokens = random_tokens(10, 256, 5);
        let batch = TokenBatch::new(1, 10, tokens.clone()).unwrap();
        let direct = forward_loss(&ckpt, &batch).unwrap().exp();
        assert_eq!(perplexity(&ckpt, &tokens, 10).unwrap(), direct);
    }

    #[test]
    fn trailing_partial_windows_are_dropped() {
        let ckpt = ModelCheckpoint::init(&tiny_config(), 2).unwrap();
        let tokens = random_tokens(3 * 8 + 5, 256, 6);
        let full = perplexity(&ckpt, &tokens, 8).unwrap();
        let trimmed = perplexity(&ckpt, &tokens[..24], 8).unwrap();
        assert_eq!(full, trimmed);
    }

    #[test]
    fn splitting_the_stream_at_window_boundaries_changes_nothing() {
        let ckpt = ModelCheckpoint::init(&tiny_config(), 3).unwrap();
        let c = 12;
        let tokens = random_tokens(6 * c, 256, 7);
        let whole = perplexity(&ckpt, &tokens, c).unwrap();
        let first = perplexity(&ckpt, &tokens[..3 * c], c).unwrap();
        let second = perplexity(&ckpt, &tokens[3 * c..], c).unwrap();
        // Equal window counts: the combined mean NLL is the average.
        let combined = ((first.ln() + second.ln()) / 2.0).exp();
        assert!(
            (whole - combined).abs() / whole < 1e-12,
            "{whole} vs {combined}"
        );
    }

    #[test]
    fn bad_evaluation_inputs_are_rejected() {
        let ckpt = ModelCheckpoint::init(&tiny_config(), 4).unwrap();
        let tokens = random_tokens(40, 256, 8);
        assert!(perplexity(&ckpt, &tokens, 1).is_err());
        assert!(perplexity(&ckpt, &tokens, 18).is_err()); // beyond max_seq_len
        assert!(perplexity(&ckpt, &[], 8).is_err());
        assert!(perplexity(&ckpt, &tokens[..7], 8).is_err()); // shorter than one window
    }

    #[test]
    fn perplexity_is_at_least_one_and_reports_serialize() {
        let ckpt = ModelCheckpoint::init(&tiny_config(), 5).unwrap();
        let tokens = random_tokens(100, 256, 9);
        let report = evaluate(&ckpt, &tokens, 10, "toy", "random").unwrap();
        assert!(report.perplexity >= 1.0);
        assert_eq!(report.param_count, ckpt.param_count());
        assert_eq!(report.mac_count, ckpt.mac_count(10));
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    fn grid_corpus() -> Corpus {
        Corpus::from_text(&synthetic_text(6000, 11), 0.8, "synthetic").unwrap()
    }

    fn grid_spec() -> CompareSpec {
        CompareSpec {
            criteria: vec![Criterion::MagnitudeL1, Criterion::Wanda],
            ratios: vec![0.0, 0.25],
            seeds: vec![0],
            context_length: 16,
            protected: vec![],
            grad_calib_sequences: 2,
            act_calib_sequences: 4,
            eval_tokens: Some(320),
            recover: None,
            ..Default::default()
        }
    }

    #[test]
    fn the_grid_produces_one_row_per_cell_in_order() {
        let base = ModelCheckpoint::init(&tiny_config(), 6).unwrap();
        let rows = compare_criteria(&base, &grid_corpus(), &grid_spec()).unwrap();
        assert_eq!(rows.len(), 4);
        let order: Vec<(Criterion, f64)> = rows.iter().map(|r| (r.criterion, r.ratio)).collect();
        assert_eq!(
            order,
            vec![
                (Criterion::MagnitudeL1, 0.0),
                (Criterion::MagnitudeL1, 0.25),
                (Criterion::Wanda, 0.0),
                (Criterion::Wanda, 0.25),
            ]
        );
        assert!(rows.iter().all(|r| !r.recovered));
        // Pruned cells really shrank.
        assert!(rows[1].param_count < rows[0].param_count);
        assert!(rows[1].mac_count < rows[0].mac_count);
    }

    #[test]
    fn a_zero_ratio_cell_reproduces_the_base_perplexity() {
        let base = ModelCheckpoint::init(&tiny_config(), 7).unwrap();
        let corpus = grid_corpus();
        let spec = CompareSpec {
            criteria: vec![Criterion::MagnitudeL2],
            ratios: vec![0.0],
            seeds: vec![3],
            ..grid_spec()
        };
        let rows = compare_criteria(&base, &corpus, &spec).unwrap();
        let val = corpus.val_tokens();
        let direct = perplexity(&base, &val[..320.min(val.len())], 16).unwrap();
        assert_eq!(rows[0].perplexity, direct);
        assert_eq!(rows[0].param_count, base.param_count());
    }

    #[test]
    fn grid_validation_rejects_empty_axes() {
        let spec = CompareSpec { criteria: vec![], ..grid_spec() };
        assert!(spec.validate().is_err());
        let spec = CompareSpec { ratios: vec![], ..grid_spec() };
        assert!(spec.validate().is_err());
        let spec = CompareSpec { seeds: vec![], ..grid_spec() };
        assert!(spec.validate().is_err());
        let spec = CompareSpec { grad_calib_sequences: 0, ..grid_spec() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn reports_render_and_round_trip_as_jsonl() {
        let base = ModelCheckpoint::init(&tiny_config(), 8).unwrap();
        let rows = compare_criteria(&base, &grid_corpus(), &grid_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let jsonl = dir.path().join("report.jsonl");
        write_report_jsonl(&rows, &jsonl).unwrap();
        let text = std::fs::read_to_string(&jsonl).unwrap();
        let parsed: Vec<CompareRow> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed, rows);

        let table = render_report_table(&rows);
        assert!(table.contains("magnitude_l1"));
        assert!(table.contains("wanda"));
        assert!(table.contains("mean perplexity over seeds"));
        assert!(table.contains("p=0.25"));
        let txt = dir.path().join("report.txt");
        write_report_text(&rows, &txt).unwrap();
        assert_eq!(std::fs::read_to_string(&txt).unwrap(), table);
    }
}
