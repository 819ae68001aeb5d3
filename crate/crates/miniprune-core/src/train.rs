//! Full-parameter pretraining for toy base models: exact backpropagated
//! gradients into a decoupled-weight-decay optimizer with a cosine
//! learning-rate schedule. This produces the dense starting checkpoints
//! that pruning and recovery operate on.

use serde::{Deserialize, Serialize};

use crate::dataio::Corpus;
use crate::error::{CoreError, Result};
use crate::model::{backward, ModelCheckpoint};
use crate::optim::{cosine_lr, AdamW, StepReport};

/// Hyperparameters for a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Total optimizer steps; epochs cycle over the corpus until reached.
    pub steps: usize,
    /// Peak learning rate; decays to zero on a cosine.
    pub learning_rate: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Scored positions per window (each window carries `seq_len + 1`
    /// tokens, so `seq_len` must stay below the model's maximum).
    pub seq_len: usize,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Master seed for window shuffling (re-derived per epoch).
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            learning_rate: 1e-3,
            batch_size: 32,
            seq_len: 64,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::config("pretraining needs at least one step"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(CoreError::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config("batch size must be at least 1"));
        }
        if self.seq_len == 0 {
            return Err(CoreError::config("sequence length must be at least 1"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(CoreError::config(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Train every parameter of the checkpoint in place and return the
/// per-step loss/learning-rate trace. Deterministic for a fixed config.
pub fn train_full(
    ckpt: &mut ModelCheckpoint,
    corpus: &Corpus,
    cfg: &PretrainConfig,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    if cfg.seq_len + 1 > ckpt.config.max_seq_len {
        return Err(CoreError::config(format!(
            "sequence length {} needs windows of {} tokens, beyond the model maximum {}",
            cfg.seq_len,
            cfg.seq_len + 1,
            ckpt.config.max_seq_len
        )));
    }

    let names = ckpt.canonical_names();
    let shapes: Vec<Vec<usize>> = names
        .iter()
        .map(|n| ckpt.tensor(n).map(|t| t.shape().to_vec()))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(&shapes, cfg.weight_decay);

    let mut reports = Vec::with_capacity(cfg.steps);
    let mut step = 0usize;
    let mut epoch = 0u64;
    while step < cfg.steps {
        let epoch_seed = cfg.seed.wrapping_add(epoch);
        let batches = corpus.train_batches(cfg.batch_size, cfg.seq_len, epoch_seed)?;
        for batch in batches {
            if step >= cfg.steps {
                break;
            }
            let lr = cosine_lr(cfg.learning_rate, step, cfg.steps);
            let (loss, grads) = backward(ckpt, &batch)
                .map_err(|e| e.with_context(format!("step {step}")))?;
            if !loss.is_finite() {
                return Err(CoreError::non_finite(format!(
                    "training loss diverged at step {step}"
                )));
            }
            for (slot, name) in names.iter().enumerate() {
                let grad = grads.grad(name)?.data().to_vec();
                let weights = ckpt.tensor_mut(name)?;
                opt.update(slot, weights.data_mut(), &grad, lr)?;
            }
            opt.advance();
            reports.push(StepReport { step, loss, lr });
            step += 1;
        }
        epoch = epoch.wrapping_add(1);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic_text;
    use crate::model::{FfnKind, ModelConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 256,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 17,
            ffn_kind: FfnKind::Gelu2,
            tie_embeddings: true,
        }
    }

    fn tiny_corpus() -> Corpus {
        Corpus::from_text(&synthetic_text(4096, 3), 0.9, "synthetic").unwrap()
    }

    #[test]
    fn config_defaults_deserialize_and_unknown_keys_fail() {
        let cfg: PretrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, PretrainConfig::default());
        let cfg: PretrainConfig =
            serde_json::from_str(r#"{"steps": 7, "seq_len": 5}"#).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.seq_len, 5);
        assert_eq!(cfg.batch_size, 32);
        assert!(serde_json::from_str::<PretrainConfig>(r#"{"lr": 0.1}"#).is_err());
    }

    #[test]
    fn bad_configs_are_rejected() {
        for bad in [
            PretrainConfig { steps: 0, ..Default::default() },
            PretrainConfig { batch_size: 0, ..Default::default() },
            PretrainConfig { seq_len: 0, ..Default::default() },
            PretrainConfig { learning_rate: f64::NAN, ..Default::default() },
            PretrainConfig { learning_rate: -1.0, ..Default::default() },
            PretrainConfig { weight_decay: -0.5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should not validate");
        }
    }

    #[test]
    fn windows_must_fit_the_model_context() {
        let mut ckpt = ModelCheckpoint::init(&tiny_config(), 0).unwrap();
        let cfg = PretrainConfig {
            steps: 1,
            seq_len: 17, // needs 18-token windows; the model takes 17
            batch_size: 2,
            ..Default::default()
        };
        let err = train_full(&mut ckpt, &tiny_corpus(), &cfg).unwrap_err();
        assert!(err.to_string().contains("maximum"), "{err}");
    }

    #[test]
    fn training_reduces_the_loss() {
        let mut ckpt = ModelCheckpoint::init(&tiny_config(), 1).unwrap();
        let cfg = PretrainConfig {
            steps: 40,
            learning_rate: 3e-3,
            batch_size: 8,
            seq_len: 16,
            weight_decay: 0.0,
            seed: 5,
        };
        let reports = train_full(&mut ckpt, &tiny_corpus(), &cfg).unwrap();
        assert_eq!(reports.len(), 40);
        let head: f64 = reports[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        let tail: f64 = reports[35..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        assert!(
            tail + 0.05 < head,
            "loss did not fall: first {head:.4}, last {tail:.4}"
        );
        // The schedule starts at the peak rate and decays.
        assert_eq!(reports[0].lr, 3e-3);
        assert!(reports[39].lr < 3e-4);
    }

    #[test]
    fn identical_configs_produce_identical_checkpoints() {
        let run = || {
            let mut ckpt = ModelCheckpoint::init(&tiny_config(), 2).unwrap();
            let cfg = PretrainConfig {
                steps: 12,
                learning_rate: 1e-3,
                batch_size: 4,
                seq_len: 16,
                weight_decay: 0.01,
                seed: 9,
            };
            let reports = train_full(&mut ckpt, &tiny_corpus(), &cfg).unwrap();
            (ckpt, reports)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        let la: Vec<f64> = ra.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = rb.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn divergence_reports_the_failing_step() {
        let mut ckpt = ModelCheckpoint::init(&tiny_config(), 3).unwrap();
        ckpt.tensor_mut("layers.0.attn.wq").unwrap().data_mut()[0] = f32::MAX;
        let cfg = PretrainConfig {
            steps: 3,
            batch_size: 2,
            seq_len: 16,
            ..Default::default()
        };
        let err = train_full(&mut ckpt, &tiny_corpus(), &cfg).unwrap_err();
        assert!(err.to_string().contains("step 0"), "{err}");
        assert!(err.is_numerical(), "{err}");
    }
}
