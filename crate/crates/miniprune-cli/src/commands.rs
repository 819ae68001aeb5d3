//! One function per subcommand. Each command reads artifacts, runs one
//! pipeline stage, and writes its outputs into the run directory; stages
//! that are skipped (e.g. no gradient estimation for magnitude criteria)
//! are visible in the log.

use std::path::Path;

use miniprune_core::dataio::{
    load_checkpoint, save_adapters, save_checkpoint, save_scores, Corpus,
};
use miniprune_core::evalkit::{compare_criteria, evaluate, render_report_table, write_report_jsonl, write_report_text};
use miniprune_core::model::{ModelCheckpoint, TokenBatch};
use miniprune_core::optim::StepReport;
use miniprune_core::pruner::{
    channel_similarity, default_protected, load_plan, run_minillm_traced, save_plan, GroupKind,
    PrunePlan,
};
use miniprune_core::recovery::{attach_lora, merge_lora, train_recovery};
use miniprune_core::train::train_full;
use miniprune_core::{CoreError, Result};

use crate::config::{write_effective_config, RunConfig};

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = cfg.data.corpus_path.as_ref().ok_or_else(|| {
        CoreError::config("data.corpus_path is required for this command")
    })?;
    let corpus = Corpus::load_text(path, cfg.data.split)?;
    println!(
        "[stage] corpus: {} ({} tokens, {} train / {} validation)",
        corpus.source(),
        corpus.len(),
        corpus.train_tokens().len(),
        corpus.val_tokens().len()
    );
    Ok(corpus)
}

fn load_model(dir: &Path) -> Result<ModelCheckpoint> {
    let ckpt = load_checkpoint(dir)?;
    println!(
        "[stage] model: {} ({} params, {} layers)",
        dir.display(),
        ckpt.param_count(),
        ckpt.config.n_layers
    );
    Ok(ckpt)
}

fn calibration_batch(
    corpus: &Corpus,
    rows: usize,
    max_seq_len: usize,
    seed: u64,
) -> Result<TokenBatch> {
    let seq_len = max_seq_len
        .checked_sub(1)
        .filter(|&s| s > 0)
        .ok_or_else(|| CoreError::config("the model context is too short for calibration"))?;
    corpus
        .train_batches(rows, seq_len, seed)?
        .next()
        .ok_or_else(|| CoreError::data("training split yields no calibration batch"))
}

fn resolve_protected(cfg: &RunConfig, n_layers: usize) -> Vec<usize> {
    cfg.prune
        .protect
        .clone()
        .unwrap_or_else(|| default_protected(n_layers))
}

fn write_step_log(reports: &[StepReport], out_dir: &Path) -> Result<()> {
    let mut text = String::new();
    for r in reports {
        let line = serde_json::to_string(r)
            .map_err(|e| CoreError::format(format!("encoding step report: {e}")))?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(out_dir.join("steps.jsonl"), text)
        .map_err(|e| CoreError::io(format!("writing step log: {e}")))
}

/// Train a fresh dense model and write it with its loss trace.
pub fn cmd_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let model_cfg = cfg.model.clone().ok_or_else(|| {
        CoreError::config("the `model` config section is required to pretrain")
    })?;
    // Inputs are validated before anything is written, so a bad run
    // leaves no partial outputs.
    model_cfg.validate()?;
    cfg.train.validate()?;
    let corpus = load_corpus(cfg)?;
    write_effective_config(cfg, out_dir)?;

    let mut ckpt = ModelCheckpoint::init(&model_cfg, cfg.train.seed)?;
    println!(
        "[stage] pretrain: {} steps, batch {}, sequence {}, lr {}",
        cfg.train.steps, cfg.train.batch_size, cfg.train.seq_len, cfg.train.learning_rate
    );
    let reports = train_full(&mut ckpt, &corpus, &cfg.train)?;
    save_checkpoint(&ckpt, out_dir)?;
    write_step_log(&reports, out_dir)?;
    let last = reports.last().expect("at least one step");
    println!(
        "[done] pretrained model written to {} (final loss {:.4})",
        out_dir.display(),
        last.loss
    );
    Ok(())
}

/// Score, rank, and slice a dense model; write the pruned checkpoint and
/// the auditable plan.
pub fn cmd_prune(cfg: &RunConfig, model_dir: &Path, out_dir: &Path) -> Result<()> {
    let mut ckpt = load_model(model_dir)?;
    let corpus = load_corpus(cfg)?;
    write_effective_config(cfg, out_dir)?;

    let criterion = cfg.prune.criterion;
    let grad_batch = calibration_batch(
        &corpus,
        cfg.prune.grad_sequences,
        ckpt.config.max_seq_len,
        cfg.prune.seed,
    )?;
    let act_batch = calibration_batch(
        &corpus,
        cfg.prune.act_sequences,
        ckpt.config.max_seq_len,
        cfg.prune.seed.wrapping_add(1),
    )?;

    if criterion.uses_zo_gradients() {
        println!(
            "[stage] zo gradient estimation: {} samples, epsilon {}, {} calibration sequences",
            cfg.zo.n_samples,
            cfg.zo.epsilon,
            grad_batch.rows()
        );
    } else if criterion.uses_backprop_gradients() {
        println!(
            "[stage] backprop gradient computation: {} calibration sequences",
            grad_batch.rows()
        );
    } else {
        println!("[stage] gradient stage skipped ({criterion} is gradient-free)");
    }
    if criterion.needs_activations() {
        println!(
            "[stage] activation norm capture: {} calibration sequences",
            act_batch.rows()
        );
    } else {
        println!("[stage] activation capture skipped ({criterion} ignores activations)");
    }

    let protected = resolve_protected(cfg, ckpt.config.n_layers);
    println!(
        "[stage] score, rank, and slice: criterion {criterion}, ratio {}, protected layers {protected:?}",
        cfg.prune.ratio
    );
    let (plan, pruned, scores) = run_minillm_traced(
        &mut ckpt,
        &grad_batch,
        &act_batch,
        &cfg.zo,
        criterion,
        cfg.prune.ratio,
        &protected,
    )?;

    save_checkpoint(&pruned, out_dir)?;
    save_plan(&plan, &out_dir.join("plan.json"))?;
    if cfg.prune.dump_scores {
        save_scores(&scores, out_dir)?;
        println!("[stage] per-weight scores dumped alongside the plan");
    }
    for e in &plan.entries {
        println!(
            "[plan] layer {} {}: retained {} of {}",
            e.layer,
            e.kind,
            e.retained.len(),
            e.total
        );
    }
    println!(
        "[done] pruned model written to {} ({} -> {} params)",
        out_dir.display(),
        ckpt.param_count(),
        pruned.param_count()
    );
    Ok(())
}

/// Attach low-rank adapters to a pruned model, train them, and write both
/// the adapters and the merged model.
pub fn cmd_recover(cfg: &RunConfig, model_dir: &Path, out_dir: &Path) -> Result<()> {
    let mut ckpt = load_model(model_dir)?;
    let corpus = load_corpus(cfg)?;
    write_effective_config(cfg, out_dir)?;

    let targets = ckpt.prunable_names();
    let lora_spec = cfg.recover.lora_spec();
    let train_cfg = cfg.recover.train_config(&cfg.zo);
    println!(
        "[stage] adapters: rank {}, alpha {}, {} targets",
        lora_spec.rank,
        lora_spec.alpha,
        targets.len()
    );
    let mut set = attach_lora(&ckpt, &targets, &lora_spec)?;
    println!(
        "[stage] recovery training: optimizer {:?}, lr {}, epochs {}, batch {}",
        train_cfg.optimizer, train_cfg.learning_rate, train_cfg.epochs, train_cfg.batch_size
    );
    let reports = train_recovery(&ckpt, &mut set, &corpus, &train_cfg)?;
    save_adapters(&set, out_dir)?;
    println!("[stage] merging adapters into the base weights");
    merge_lora(&mut ckpt, &mut set)?;
    save_checkpoint(&ckpt, out_dir)?;
    write_step_log(&reports, out_dir)?;
    match (reports.first(), reports.last()) {
        (Some(first), Some(last)) => println!(
            "[done] recovered model written to {} (loss {:.4} -> {:.4} over {} steps)",
            out_dir.display(),
            first.loss,
            last.loss,
            reports.len()
        ),
        _ => println!("[done] recovered model written to {}", out_dir.display()),
    }
    Ok(())
}

/// Evaluate perplexity on the validation split and report it.
pub fn cmd_eval(cfg: &RunConfig, model_dir: &Path, out_dir: Option<&Path>) -> Result<()> {
    let ckpt = load_model(model_dir)?;
    let corpus = load_corpus(cfg)?;
    println!(
        "[stage] perplexity: context {} over the validation split",
        cfg.eval.context_length
    );
    let report = evaluate(
        &ckpt,
        corpus.val_tokens(),
        cfg.eval.context_length,
        &model_dir.display().to_string(),
        &format!("{}[val]", corpus.source()),
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CoreError::format(format!("encoding report: {e}")))?;
    println!("{json}");
    if let Some(dir) = out_dir {
        write_effective_config(cfg, dir)?;
        std::fs::write(dir.join("eval.json"), &json)
            .map_err(|e| CoreError::io(format!("writing eval report: {e}")))?;
        println!("[done] report written to {}", dir.join("eval.json").display());
    }
    Ok(())
}

/// Run the criterion × ratio × seed grid and write both report formats.
pub fn cmd_compare(cfg: &RunConfig, model_dir: &Path, out_dir: &Path) -> Result<()> {
    let base = load_model(model_dir)?;
    let corpus = load_corpus(cfg)?;
    write_effective_config(cfg, out_dir)?;

    let protected = resolve_protected(cfg, base.config.n_layers);
    let spec = cfg.compare_spec(protected);
    println!(
        "[stage] grid: {} criteria x {} ratios x {} seeds ({}), recovery {}",
        spec.criteria.len(),
        spec.ratios.len(),
        spec.seeds.len(),
        spec.criteria.len() * spec.ratios.len() * spec.seeds.len(),
        if spec.recover.is_some() { "on" } else { "off" }
    );
    let rows = compare_criteria(&base, &corpus, &spec)?;
    write_report_jsonl(&rows, &out_dir.join("report.jsonl"))?;
    write_report_text(&rows, &out_dir.join("report.txt"))?;
    print!("{}", render_report_table(&rows));
    println!("[done] reports written to {}", out_dir.display());
    Ok(())
}

fn print_plan_summary(label: &str, plan: &PrunePlan) {
    println!(
        "plan {label}: ratio {:.2}, scope {}, protected layers {:?}, seed {}",
        plan.ratio, plan.scope, plan.protected_layers, plan.seed
    );
    if !plan.provenance.is_empty() {
        println!("  provenance: {}", plan.provenance);
    }
    for e in &plan.entries {
        println!(
            "  layer {} {}: retained {} of {}",
            e.layer,
            e.kind,
            e.retained.len(),
            e.total
        );
    }
}

/// Print plan summaries; with two plans, also the retained-set overlap.
pub fn cmd_inspect(plan_path: &Path, plan_b_path: Option<&Path>) -> Result<()> {
    let plan_a = load_plan(plan_path)?;
    print_plan_summary("A", &plan_a);
    let Some(b_path) = plan_b_path else {
        return Ok(());
    };
    let plan_b = load_plan(b_path)?;
    print_plan_summary("B", &plan_b);

    println!("retained-set similarity (how much of A survives in B):");
    let mut sims = Vec::new();
    for e in &plan_a.entries {
        let other = plan_b.entry(e.layer, e.kind).ok_or_else(|| {
            CoreError::config(format!(
                "plan B has no entry for layer {} {}; the plans cover different architectures",
                e.layer, e.kind
            ))
        })?;
        let sim = channel_similarity(&e.retained, &other.retained)?;
        let kind_label = match e.kind {
            GroupKind::AttentionHead => "heads",
            GroupKind::FfnChannel => "channels",
        };
        println!("  layer {} {kind_label}: {sim:.2}%", e.layer);
        sims.push(sim);
    }
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    println!("  mean: {mean:.2}%");
    Ok(())
}
