use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{StepRecord, TrainState};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};

const FORMAT: &str = "mmfs-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream. `word_pos` is a decimal string because JSON
/// numbers do not carry 128 bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Version(format!("corrupt rng state: {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub architecture_hash: String,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub rng: RngState,
    pub epoch: usize,
    pub history: Vec<StepRecord>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: state.config.clone(),
            config_hash: state.config.fingerprint(),
            architecture_hash: state.config.architecture_fingerprint(),
            params: state.store.clone(),
            optimizer: state.optimizer.clone(),
            rng: RngState::capture(&state.rng),
            epoch: state.epoch,
            history: state.history.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let format = raw.get("format").and_then(|v| v.as_str());
        let version = raw.get("version").and_then(|v| v.as_u64());
        if format != Some(FORMAT) {
            return Err(Error::Version(format!("not a checkpoint (format {format:?})")));
        }
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Version(format!(
                "checkpoint version {version:?}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fails with a version error unless `config` describes the same
    /// architecture the parameters were trained for.
    pub fn check_compatible(&self, config: &RunConfig) -> Result<()> {
        let want = config.architecture_fingerprint();
        if self.architecture_hash != want {
            return Err(Error::Version(format!(
                "checkpoint architecture {} does not match configuration {}",
                &self.architecture_hash[..12],
                &want[..12]
            )));
        }
        Ok(())
    }

    /// Rebuild the training state, with `config` replacing the stored one
    /// (e.g. for evaluation flags or more epochs).
    pub fn into_state(self, config: &RunConfig) -> Result<TrainState> {
        self.check_compatible(config)?;
        let mut fresh = TrainState::new(config)?;
        let names_match = fresh.store.len() == self.params.len()
            && fresh
                .store
                .iter()
                .zip(self.params.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !names_match {
            return Err(Error::Version("checkpoint parameters do not match the model layout".into()));
        }
        fresh.store = self.params;
        fresh.optimizer = self.optimizer;
        fresh.optimizer.config = config.optim.adam();
        fresh.rng = self.rng.restore()?;
        fresh.epoch = self.epoch;
        fresh.history = self.history;
        Ok(fresh)
    }
}
