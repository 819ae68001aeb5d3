//! End-to-end behavior that spans modules: pretraining to memorization,
//! prune → recover → evaluate improvements, and persistence of pruned
//! checkpoints.

use miniprune_core::dataio::{save_checkpoint, load_checkpoint, synthetic_text, Corpus};
use miniprune_core::evalkit::perplexity;
use miniprune_core::model::{forward_loss, FfnKind, ModelCheckpoint, ModelConfig, TokenBatch};
use miniprune_core::pruner::run_minillm;
use miniprune_core::recovery::{attach_lora, merge_lora, train_recovery, LoraSpec, TrainConfig};
use miniprune_core::rng::{Distribution, RngStream};
use miniprune_core::scoring::Criterion;
use miniprune_core::train::{train_full, PretrainConfig};
use miniprune_core::zo::PerturbSpec;

fn perturb(seed: u64) -> PerturbSpec {
    PerturbSpec {
        epsilon: 1e-3,
        n_samples: 8,
        distribution: Distribution::Rademacher,
        base_seed: seed,
        clamp: false,
    }
}

#[test]
fn a_tiny_model_memorizes_an_alternating_pattern() {
    let cfg = ModelConfig {
        vocab_size: 256,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 17,
        ffn_kind: FfnKind::Gelu2,
        tie_embeddings: true,
    };
    let mut ckpt = ModelCheckpoint::init(&cfg, 0).unwrap();
    let text = "ab".repeat(1500);
    let corpus = Corpus::from_text(text.as_bytes(), 0.8, "alternation").unwrap();
    let train_cfg = PretrainConfig {
        steps: 400,
        learning_rate: 6e-3,
        batch_size: 8,
        seq_len: 16,
        weight_decay: 0.0,
        seed: 1,
    };
    let reports = train_full(&mut ckpt, &corpus, &train_cfg).unwrap();
    assert_eq!(reports.len(), 400);
    let ppl = perplexity(&ckpt, corpus.val_tokens(), 16).unwrap();
    assert!(
        ppl < 1.1,
        "a deterministic pattern should be memorized to near-certainty, got PPL {ppl:.4}"
    );
    assert!(ppl >= 1.0);
}

#[test]
fn low_rank_recovery_repairs_a_pruned_model() {
    let cfg = ModelConfig {
        vocab_size: 256,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 48,
        max_seq_len: 33,
        ffn_kind: FfnKind::Gelu2,
        tie_embeddings: true,
    };
    let mut base = ModelCheckpoint::init(&cfg, 2).unwrap();
    let corpus = Corpus::from_text(&synthetic_text(32_768, 5), 0.85, "synthetic").unwrap();
    let pre_cfg = PretrainConfig {
        steps: 500,
        learning_rate: 3e-3,
        batch_size: 8,
        seq_len: 32,
        weight_decay: 0.0,
        seed: 3,
    };
    train_full(&mut base, &corpus, &pre_cfg).unwrap();
    let base_ppl = perplexity(&base, corpus.val_tokens(), 32).unwrap();

    // One-shot prune at 50% so the damage is visible and repairable.
    let grad_batch = corpus.train_batches(4, 32, 100).unwrap().next().unwrap();
    let act_batch = corpus.train_batches(16, 32, 101).unwrap().next().unwrap();
    let (_plan, mut pruned) = run_minillm(
        &mut base,
        &grad_batch,
        &act_batch,
        &perturb(7),
        Criterion::MagnitudeL2,
        0.5,
        &[],
    )
    .unwrap();
    let pruned_ppl = perplexity(&pruned, corpus.val_tokens(), 32).unwrap();
    assert!(
        pruned_ppl > 1.1 * base_ppl,
        "removing half the groups should hurt: base {base_ppl:.3}, pruned {pruned_ppl:.3}"
    );

    // Recover with low-rank adapters on every prunable matrix and merge.
    let targets = pruned.prunable_names();
    let lora_spec = LoraSpec { rank: 4, alpha: 8.0, scaled: true, seed: 11 };
    let mut adapters = attach_lora(&pruned, &targets, &lora_spec).unwrap();
    let recover_cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 8,
        batch_size: 8,
        max_steps: Some(200),
        seed: 13,
        ..Default::default()
    };
    let reports = train_recovery(&pruned, &mut adapters, &corpus, &recover_cfg).unwrap();
    assert!(reports.len() <= 200);
    merge_lora(&mut pruned, &mut adapters).unwrap();

    let recovered_ppl = perplexity(&pruned, corpus.val_tokens(), 32).unwrap();
    assert!(
        recovered_ppl <= 0.95 * pruned_ppl,
        "recovery should win at least 5% relative: pruned {pruned_ppl:.3}, recovered {recovered_ppl:.3}"
    );
    assert!(recovered_ppl >= 1.0);
}

#[test]
fn pruned_checkpoints_survive_a_save_load_cycle_and_run() {
    let cfg = ModelConfig {
        vocab_size: 256,
        d_model: 32,
        n_layers: 3,
        n_heads: 4,
        d_ff: 48,
        max_seq_len: 17,
        ffn_kind: FfnKind::Swiglu3,
        tie_embeddings: false,
    };
    let corpus = Corpus::from_text(&synthetic_text(8_192, 9), 0.9, "synthetic").unwrap();
    let grad_batch = corpus.train_batches(2, 16, 200).unwrap().next().unwrap();
    let act_batch = corpus.train_batches(8, 16, 201).unwrap().next().unwrap();
    let mut eval_rng = RngStream::new(77, 0);
    let eval_tokens: Vec<u32> = (0..170).map(|_| eval_rng.next_below(256) as u32).collect();
    let eval_batch = TokenBatch::new(10, 17, eval_tokens).unwrap();

    for p in [0.1, 0.3, 0.5] {
        let mut base = ModelCheckpoint::init(&cfg, 4).unwrap();
        let (plan, pruned) = run_minillm(
            &mut base,
            &grad_batch,
            &act_batch,
            &perturb(21),
            Criterion::FmsZo,
            p,
            &[0],
        )
        .unwrap();
        assert!(plan.entries.iter().all(|e| !e.retained.is_empty()));

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&pruned, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, pruned, "p={p}: reload must be bit-exact");

        let loss = forward_loss(&loaded, &eval_batch).unwrap();
        assert!(loss.is_finite(), "p={p}: loss {loss}");
    }
}
