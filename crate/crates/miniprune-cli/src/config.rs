//! The run configuration: one JSON document with a section per pipeline
//! stage, strict about unknown keys, with every default documented here.
//! `--set a.b=value` overrides are applied to the raw document before it
//! is parsed, so they face the same validation as the file itself.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use miniprune_core::evalkit::{CompareSpec, RecoverArm};
use miniprune_core::model::ModelConfig;
use miniprune_core::recovery::{LoraSpec, Optimizer, TrainConfig};
use miniprune_core::scoring::Criterion;
use miniprune_core::train::PretrainConfig;
use miniprune_core::zo::PerturbSpec;
use miniprune_core::{CoreError, Result};

/// Pruning stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    /// Fraction of groups removed per layer and kind, in `[0, 1)`.
    pub ratio: f64,
    pub criterion: Criterion,
    /// Layers exempt from pruning; `null` means first and last.
    pub protect: Option<Vec<usize>>,
    /// Seed for drawing calibration windows from the training split.
    pub seed: u64,
    /// Sequences in the gradient-calibration batch.
    pub grad_sequences: usize,
    /// Sequences in the activation-calibration batch.
    pub act_sequences: usize,
    /// Also write the per-weight score container next to the plan.
    pub dump_scores: bool,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            ratio: 0.3,
            criterion: Criterion::FmsZo,
            protect: None,
            seed: 0,
            grad_sequences: 10,
            act_sequences: 128,
            dump_scores: false,
        }
    }
}

/// Recovery stage settings; `r`/`alpha` shape the adapters, the rest
/// drives their training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverSection {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub r: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Hard cap on optimizer steps (`null` = run all epochs).
    pub max_steps: Option<usize>,
    /// Apply the `alpha / r` scaling to the adapter correction.
    pub scaled: bool,
}

impl Default for RecoverSection {
    fn default() -> Self {
        RecoverSection {
            optimizer: Optimizer::Adamw,
            lr: 1e-4,
            epochs: 2,
            batch_size: 64,
            r: 8,
            alpha: 16.0,
            seed: 0,
            max_steps: None,
            scaled: true,
        }
    }
}

impl RecoverSection {
    pub fn lora_spec(&self) -> LoraSpec {
        LoraSpec { rank: self.r, alpha: self.alpha, scaled: self.scaled, seed: self.seed }
    }

    /// The training schedule; forward-only optimization borrows the run's
    /// perturbation settings.
    pub fn train_config(&self, zo: &PerturbSpec) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed: self.seed,
            max_steps: self.max_steps,
            perturb: match self.optimizer {
                Optimizer::ZoSgd => Some(zo.clone()),
                Optimizer::Adamw => None,
            },
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Tokens per evaluation window.
    pub context_length: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { context_length: 128 }
    }
}

/// Corpus location and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Byte-level text file; required by every command that touches data.
    pub corpus_path: Option<PathBuf>,
    /// Leading fraction of the tokens used for training; the rest is the
    /// validation split.
    pub split: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { corpus_path: None, split: 0.9 }
    }
}

/// Grid settings for the `compare` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub criteria: Vec<Criterion>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub grad_calib_sequences: usize,
    pub act_calib_sequences: usize,
    /// Cap on validation tokens scored per cell (`null` = all).
    pub eval_tokens: Option<usize>,
    /// Recover every cell with the `recover` section's budget before
    /// evaluating.
    pub recover: bool,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            criteria: vec![Criterion::MagnitudeL2, Criterion::Wanda, Criterion::FmsZo],
            ratios: vec![0.3],
            seeds: vec![0, 1, 2],
            grad_calib_sequences: 10,
            act_calib_sequences: 128,
            eval_tokens: None,
            recover: false,
        }
    }
}

/// The whole run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Architecture; required by `pretrain`, ignored by commands that load
    /// an existing checkpoint.
    pub model: Option<ModelConfig>,
    /// Gradient-estimation settings shared by pruning and forward-only
    /// recovery.
    pub zo: PerturbSpec,
    pub prune: PruneSection,
    pub recover: RecoverSection,
    pub eval: EvalSection,
    pub data: DataSection,
    /// Pretraining schedule for `pretrain`.
    pub train: PretrainConfig,
    pub compare: CompareSection,
}

impl RunConfig {
    /// Assemble the comparison grid from the relevant sections.
    pub fn compare_spec(&self, protected: Vec<usize>) -> CompareSpec {
        CompareSpec {
            criteria: self.compare.criteria.clone(),
            ratios: self.compare.ratios.clone(),
            seeds: self.compare.seeds.clone(),
            context_length: self.eval.context_length,
            protected,
            perturb: self.zo.clone(),
            grad_calib_sequences: self.compare.grad_calib_sequences,
            act_calib_sequences: self.compare.act_calib_sequences,
            eval_tokens: self.compare.eval_tokens,
            recover: if self.compare.recover {
                Some(RecoverArm {
                    lora: self.recover.lora_spec(),
                    train: self.recover.train_config(&self.zo),
                })
            } else {
                None
            },
        }
    }
}

/// Parse one `section.key=value` override. The value is interpreted as
/// JSON when it parses as such, otherwise as a bare string.
fn parse_override(raw: &str) -> Result<(Vec<String>, serde_json::Value)> {
    let (path, value) = raw.split_once('=').ok_or_else(|| {
        CoreError::config(format!("override '{raw}' is not of the form key.path=value"))
    })?;
    let segments: Vec<String> = path.split('.').map(str::to_string).collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CoreError::config(format!("override '{raw}' has an empty path segment")));
    }
    let parsed = serde_json::from_str::<serde_json::Value>(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    Ok((segments, parsed))
}

fn apply_override(doc: &mut serde_json::Value, segments: &[String], value: serde_json::Value) -> Result<()> {
    let mut node = doc;
    for seg in &segments[..segments.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| {
                CoreError::config(format!("override path '{seg}' does not name an object"))
            })?
            .entry(seg.clone())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| {
        CoreError::config("override path ends inside a non-object value".to_string())
    })?;
    obj.insert(segments.last().unwrap().clone(), value);
    Ok(())
}

/// Load the config file, apply `--set` overrides, and parse strictly.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::io(format!("reading config {}: {e}", path.display())))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CoreError::config(format!("config {} is not valid JSON: {e}", path.display())))?;
    for raw in overrides {
        let (segments, value) = parse_override(raw)?;
        apply_override(&mut doc, &segments, value)?;
    }
    serde_json::from_value(doc)
        .map_err(|e| CoreError::config(format!("config {}: {e}", path.display())))
}

/// Write the fully-resolved config (defaults and overrides applied) into
/// the run directory so the run is reproducible from its artifacts alone.
pub fn write_effective_config(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(cfg)
        .map_err(|e| CoreError::format(format!("encoding effective config: {e}")))?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CoreError::io(format!("creating {}: {e}", out_dir.display())))?;
    std::fs::write(out_dir.join("config.json"), json)
        .map_err(|e| CoreError::io(format!("writing effective config: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn an_empty_document_yields_all_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.prune.ratio, 0.3);
        assert_eq!(cfg.prune.criterion, Criterion::FmsZo);
        assert_eq!(cfg.recover.r, 8);
        assert_eq!(cfg.recover.alpha, 16.0);
        assert_eq!(cfg.recover.lr, 1e-4);
        assert_eq!(cfg.eval.context_length, 128);
        assert_eq!(cfg.data.split, 0.9);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"pruning": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"prune": {"rato": 0.5}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"recover": {"rank": 4}}"#).is_err());
    }

    #[test]
    fn overrides_patch_the_document_before_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"prune": {"ratio": 0.2}}"#).unwrap();
        let cfg = load_config(
            &path,
            &[
                "prune.ratio=0.45".to_string(),
                "prune.protect=[0,3]".to_string(),
                "data.corpus_path=corpus.txt".to_string(),
                "recover.max_steps=7".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.prune.ratio, 0.45);
        assert_eq!(cfg.prune.protect, Some(vec![0, 3]));
        assert_eq!(cfg.data.corpus_path, Some(PathBuf::from("corpus.txt")));
        assert_eq!(cfg.recover.max_steps, Some(7));
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, "{}").unwrap();
        assert!(load_config(&path, &["prune.ratio".to_string()]).is_err());
        assert!(load_config(&path, &["prune..ratio=1".to_string()]).is_err());
        // Unknown key introduced by an override fails the strict parse.
        assert!(load_config(&path, &["prune.rato=0.5".to_string()]).is_err());
    }

    #[test]
    fn zo_sgd_recovery_borrows_the_perturbation_settings() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"zo": {"epsilon": 0.01, "n_samples": 4}, "recover": {"optimizer": "zo_sgd"}}"#,
        )
        .unwrap();
        let tc = cfg.recover.train_config(&cfg.zo);
        assert_eq!(tc.optimizer, Optimizer::ZoSgd);
        let p = tc.perturb.unwrap();
        assert_eq!(p.epsilon, 0.01);
        assert_eq!(p.n_samples, 4);
        let tc = RecoverSection::default().train_config(&cfg.zo);
        assert!(tc.perturb.is_none());
    }
}
