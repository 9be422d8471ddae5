//! The experiment configuration: one document that pins every knob of a
//! run, hashed so reports can prove which configuration produced them.

use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::consolidation::ConsolidationConfig;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::pipeline::train::TrainConfig;
use crate::pipeline::Variant;
use crate::refinement::RefinementConfig;

/// Which classes arrive during the incremental phase, and in how many
/// equally sized tasks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    /// Stream classes in introduction order.
    pub classes: Vec<u32>,
    pub num_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub stream: StreamConfig,
    pub lora: LoraConfig,
    /// Per-task adapter training.
    pub individual: TrainConfig,
    pub consolidation: ConsolidationConfig,
    pub refinement: RefinementConfig,
    /// Variant `run` executes when none is named on the command line.
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub eval_batch_size: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults: small enough to run a full ablation on one
    /// core in minutes, large enough that the method differences show.
    pub fn desk_default() -> ExperimentConfig {
        ExperimentConfig {
            backbone: BackboneConfig {
                num_blocks: 4,
                model_dim: 64,
                num_heads: 4,
                mlp_hidden: 128,
                input_dim: 64,
                tokens: 8,
            },
            pretrain: PretrainConfig {
                classes: (0..10).collect(),
                epochs: 12,
                batch_size: 32,
                learning_rate: 0.15,
                momentum: 0.9,
                min_holdout_accuracy: 0.7,
                seed: 1234,
            },
            stream: StreamConfig { classes: (10..20).collect(), num_tasks: 5 },
            lora: LoraConfig { rank: 4, init_std: 0.02 },
            individual: TrainConfig {
                epochs: 14,
                batch_size: 32,
                learning_rate: 0.25,
                momentum: 0.9,
            },
            consolidation: ConsolidationConfig {
                epochs: 5,
                batch_size: 16,
                learning_rate: 0.1,
                momentum: 0.9,
                temperature: 0.1,
                lambda_init: [0.5, 0.5],
                merge_dataset_size: 100,
            },
            refinement: RefinementConfig {
                epochs: 10,
                batch_size: 64,
                learning_rate: 0.1,
                momentum: 0.9,
                pseudo_per_class: 64,
            },
            variant: Variant::DesireFull,
            seeds: vec![11, 12, 13, 14, 15],
            eval_batch_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.individual.validate()?;
        self.consolidation.validate()?;
        self.refinement.validate()?;
        self.lora.validate(self.backbone.model_dim, self.backbone.model_dim)?;

        let no_dups = |ids: &[u32], what: &str| -> Result<()> {
            let mut seen = std::collections::BTreeSet::new();
            for &c in ids {
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {c} appears twice in {what}")));
                }
            }
            Ok(())
        };
        no_dups(&self.pretrain.classes, "the pretraining classes")?;
        no_dups(&self.stream.classes, "the stream classes")?;
        if self.pretrain.classes.is_empty() || self.stream.classes.is_empty() {
            return Err(Error::Config("pretrain and stream class lists must be non-empty".into()));
        }
        for c in &self.stream.classes {
            if self.pretrain.classes.contains(c) {
                return Err(Error::Leakage(format!(
                    "class {c} is in both the pretraining set and the stream"
                )));
            }
        }
        if self.stream.num_tasks == 0
            || self.stream.classes.len() % self.stream.num_tasks != 0
        {
            return Err(Error::Config(format!(
                "{} stream classes cannot split into {} equal tasks",
                self.stream.classes.len(),
                self.stream.num_tasks
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("evaluation batch size must be positive".into()));
        }
        Ok(())
    }

    /// Compact JSON with field order fixed by the struct declaration —
    /// the canonical form the hash covers.
    pub fn canonical_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical form, hex-encoded; embedded in every
    /// report produced under this configuration.
    pub fn hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json()?.as_bytes());
        let digest = hasher.finalize();
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("reading {}: {e}", path.display()))))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("writing {}: {e}", path.display()))))
    }
}
