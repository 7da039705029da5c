//! Minimal dense-network substrate with hand-derived gradients.

mod adam;
pub mod arch;
pub mod io;
mod layers;
mod network;
mod tensor;

pub use adam::Adam;
pub use arch::{parameter_count, LayerSpec};
pub use io::ModelFile;
pub use layers::{Activation, Dense, DenseGrads, LayerNorm, NormGrads};
pub use network::{accumulate, clip_global_norm, Layer, Mlp, ParamMut};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer}: expected trailing dimension {expected}, got {got}")]
    Dimension { layer: String, expected: usize, got: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layer {0}: backward called without a cached forward pass")]
    MissingCache(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
