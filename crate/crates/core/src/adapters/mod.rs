//! Interfaces to the external models the pipeline depends on, with
//! deterministic CPU mocks.
//!
//! The image backbone, region proposer and text/audio embedders are frozen
//! and parameter-free. The mask prompt encoder and mask decoder are
//! trainable stand-ins whose parameters live in the model's [`ParamStore`].
//!
//! [`ParamStore`]: crate::nn::ParamStore

mod backbone;
mod decoder;
mod embed;
mod prompt_encoder;
mod proposer;

pub use backbone::{FeatureExtractor, RandomConvBackbone};
pub use decoder::{DecoderInputs, MaskDecoder};
pub use embed::{
    read_fixture, write_fixture, EmbeddingRole, FixtureEmbedder, FixtureManifest, MockEmbedder,
    ModalityEmbedder, RawStrings, TextPayload,
};
pub(crate) use embed::cosine;
pub use prompt_encoder::MaskPromptEncoder;
pub use proposer::{ColourGraphProposer, ProposalSet, RegionProposer};
