use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Fold / class-split protocol violation.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    /// Invalid synthetic dataset specification.
    #[error("dataset spec error: {0}")]
    DatasetSpec(String),

    #[error("missing fixture for category `{category}` (role `{role}`)")]
    MissingFixture { category: String, role: String },

    #[error("invalid fixture {path}: {reason}")]
    Fixture { path: PathBuf, reason: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("overlap ratio undefined for an empty proposal")]
    UndefinedRatio,

    #[error("mask is empty at feature resolution")]
    EmptyRegion,

    #[error("prior error: {0}")]
    Prior(String),

    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (episode seed {episode_seed})")]
    Divergence {
        loss: f64,
        epoch: usize,
        step: usize,
        episode_seed: u64,
    },

    #[error("incompatible checkpoint: {0}")]
    Version(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
