//! Desk-scale generative stack: prompt embedder, pixel/latent autoencoder,
//! conditional noise predictor and a DDIM sampler.

mod autoencoder;
mod corpus;
mod diffusion;
mod prompt;

pub use autoencoder::{train_autoencoder, AeTrainConfig, Autoencoder, TrainLog};
pub use corpus::{render, Corpus, ImageSpec, PromptGrammar};
pub use diffusion::{
    ddim_step, denoiser_loss, diffuse_forward, generate_latent, predict_z0, train_denoiser,
    Denoiser, DenoiserTrainConfig, NoisePredictor, NoiseSchedule, ZeroPredictor,
};
pub use prompt::{embed_prompt, tokenize, PromptEmbedding};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("{what}: expected {expected} values, got {got}")]
    Dimension { what: String, expected: usize, got: usize },
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub(crate) fn check_len(what: &str, expected: usize, got: usize) -> Result<(), GenError> {
    if expected == got {
        Ok(())
    } else {
        Err(GenError::Dimension { what: what.into(), expected, got })
    }
}

/// Channel-height-width triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Dims { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Image with values in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    pub dims: Dims,
    pub values: Vec<f32>,
}

impl PixelImage {
    pub fn new(dims: Dims, values: Vec<f32>) -> Result<Self, GenError> {
        check_len("image", dims.len(), values.len())?;
        Ok(PixelImage { dims, values })
    }

    /// 8-bit view used by the metrics (`i_max = 255`).
    pub fn quantized(&self) -> Vec<u8> {
        self.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeature {
    pub dims: Dims,
    pub values: Vec<f32>,
}

impl LatentFeature {
    pub fn new(dims: Dims, values: Vec<f32>) -> Result<Self, GenError> {
        check_len("latent", dims.len(), values.len())?;
        Ok(LatentFeature { dims, values })
    }
}

/// Sizes shared by every generative component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub image: Dims,
    /// Spatial down-sampling factor between pixel and latent space.
    pub downsample: usize,
    pub latent_channels: usize,
    pub steps: usize,
    pub embed_dim: usize,
    pub max_tokens: usize,
    pub time_dim: usize,
    pub ae_hidden: usize,
    pub denoiser_hidden: usize,
}

impl GenConfig {
    pub fn desk() -> Self {
        GenConfig {
            image: Dims::new(1, 32, 32),
            downsample: 4,
            latent_channels: 2,
            steps: 10,
            embed_dim: 32,
            max_tokens: 8,
            time_dim: 16,
            ae_hidden: 256,
            denoiser_hidden: 256,
        }
    }

    /// Sizes of the full-resolution deployment; only used for arithmetic.
    pub fn paper_arithmetic() -> Self {
        GenConfig {
            image: Dims::new(4, 512, 512),
            downsample: 8,
            latent_channels: 4,
            steps: 50,
            embed_dim: 768,
            max_tokens: 77,
            time_dim: 320,
            ae_hidden: 0,
            denoiser_hidden: 0,
        }
    }

    pub fn latent_dims(&self) -> Dims {
        Dims::new(
            self.latent_channels,
            self.image.height / self.downsample.max(1),
            self.image.width / self.downsample.max(1),
        )
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::Argument(m));
        if self.image.is_empty() || self.latent_channels == 0 {
            return bad("image and latent sizes must be non-zero".into());
        }
        if self.downsample == 0
            || self.image.height % self.downsample != 0
            || self.image.width % self.downsample != 0
        {
            return bad(format!(
                "image {} is not divisible by down-sampling factor {}",
                self.image, self.downsample
            ));
        }
        if self.latent_dims().len() >= self.image.len() {
            return bad(format!(
                "latent {} must be smaller than image {}",
                self.latent_dims(),
                self.image
            ));
        }
        if self.steps == 0 || self.embed_dim == 0 || self.max_tokens == 0 {
            return bad("steps, embed_dim and max_tokens must be positive".into());
        }
        if self.time_dim % 2 != 0 {
            return bad(format!("time_dim {} must be even", self.time_dim));
        }
        Ok(())
    }
}
