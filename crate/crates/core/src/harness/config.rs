use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episode::SyntheticDatasetSpec;
use crate::error::{Error, Result};
use crate::fuse::{DropoutRates, Modalities};
use crate::model::{ModelDims, PipelineConfig};
use crate::nn::AdamConfig;
use crate::reconstruct::Paths;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generate the dataset in memory.
    Synthetic(SyntheticDatasetSpec),
    /// Load a dataset directory written by `save_dataset`.
    Path(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticDatasetSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: AdamConfig::default().learning_rate,
            batch_size: 4,
            epochs: 10,
            episodes_per_epoch: 200,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.episodes_per_epoch.div_ceil(self.batch_size)
    }
}

/// Which classes and samples evaluation episodes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    /// Novel classes of the fold, every sample.
    #[default]
    Novel,
    /// Training classes, queries and supports from the training samples.
    Train,
    /// Training classes, queries from the held-out samples, supports from
    /// the training samples.
    HeldOut,
}

impl EvalTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalTarget::Novel => "novel",
            EvalTarget::Train => "train",
            EvalTarget::HeldOut => "held_out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes_per_class: usize,
    pub target: EvalTarget,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_class: 50,
            target: EvalTarget::Novel,
        }
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub fold: usize,
    pub shots: usize,
    pub model: ModelDims,
    pub pipeline: PipelineConfig,
    pub dropout: DropoutRates,
    pub modalities: Modalities,
    pub paths: Paths,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    /// Overrides the fold's base classes for training.
    pub train_classes: Option<Vec<u32>>,
    /// Trailing samples of each class kept out of training episodes.
    pub holdout_per_class: usize,
    /// Cosine between mock audio and category embeddings.
    pub audio_text_cosine: f64,
    pub backbone_seed: u64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            fold: 0,
            shots: 1,
            model: ModelDims::default(),
            pipeline: PipelineConfig::default(),
            dropout: DropoutRates::default(),
            modalities: Modalities::ALL,
            paths: Paths::FULL,
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            train_classes: None,
            holdout_per_class: 0,
            audio_text_cosine: crate::adapters::MockEmbedder::DEFAULT_AUDIO_TEXT_COSINE,
            backbone_seed: 0,
            seed: 0,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    /// Parse TOML or JSON, chosen by file extension (`.json` is JSON,
    /// anything else TOML).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fold >= crate::episode::NUM_FOLDS {
            return Err(Error::config(format!("fold {} outside [0, 3]", self.fold)));
        }
        if !self.modalities.any() {
            return Err(Error::config("at least one modality must be enabled"));
        }
        if !(self.modalities.text || self.modalities.audio) && self.shots == 0 {
            return Err(Error::config("a 0-shot run needs the text or audio modality"));
        }
        if !(self.paths.semantic || self.paths.geometric) {
            return Err(Error::config("at least one reconstruction path must be enabled"));
        }
        self.model.validate()?;
        self.pipeline.validate()?;
        self.dropout.validate()?;
        if self.optim.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.optim.learning_rate > 0.0 && self.optim.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.optim.learning_rate)));
        }
        if !(-1.0..=1.0).contains(&self.audio_text_cosine) {
            return Err(Error::config(format!(
                "audio_text_cosine {} outside [-1, 1]",
                self.audio_text_cosine
            )));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(|e| Error::config(e.to_string()))?;
            if spec.image_size % self.model.stride != 0 {
                return Err(Error::config(format!(
                    "image size {} not divisible by stride {}",
                    spec.image_size, self.model.stride
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    /// SHA-256 over the fields a checkpoint's parameters depend on.
    pub fn architecture_fingerprint(&self) -> String {
        let key = serde_json::json!({
            "model": self.model,
            "backbone_seed": self.backbone_seed,
        });
        sha256_hex(key.to_string().as_bytes())
    }
}
