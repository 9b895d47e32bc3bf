pub mod adapters;
pub mod autograd;
pub mod decompose;
pub mod episode;
pub mod error;
pub mod fuse;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod reconstruct;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
