//! Experiment configuration: one TOML file with a section per component.
//!
//! The canonical form is the config re-serialized by [`ExperimentConfig::canonical`];
//! its SHA-256 prefix is the config hash stamped on every output row.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::channel::ChannelKind;
use crate::genmodel::{AeTrainConfig, DenoiserTrainConfig, GenConfig};
use crate::metrics::Mode;
use crate::power::PpoConfig;
use crate::seedcodec::CodecTrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperArithmetic,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::PaperArithmetic => "paper-arithmetic",
        })
    }
}

impl FromStr for Preset {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-arithmetic" | "paper" => Ok(Preset::PaperArithmetic),
            other => Err(ExperimentError::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Rendered training images per prompt.
    pub per_prompt: usize,
    /// Sampled latents per prompt used to train the codecs.
    pub codec_samples_per_prompt: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { per_prompt: 8, codec_samples_per_prompt: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub rates: Vec<f64>,
    /// One codec is trained per rate and per training SNR.
    pub train_snrs_db: Vec<f64>,
    pub train: CodecTrainConfig,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            rates: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            train_snrs_db: vec![-10.0, 10.0, 30.0],
            train: CodecTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub modes: Vec<Mode>,
    pub rates: Vec<f64>,
    pub snrs_db: Vec<f64>,
    pub channel: ChannelKind,
    pub block_length: usize,
    pub trials: usize,
    /// Evaluation prompts per trial (the FID-proxy batch).
    pub prompts: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            modes: Mode::ALL.to_vec(),
            rates: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            snrs_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 20.0, 30.0],
            channel: ChannelKind::Awgn,
            block_length: 16,
            trials: 5,
            prompts: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    pub f_c: f64,
    pub snr_db: f64,
    pub channel: ChannelKind,
    pub block_length: usize,
    /// Prompts in the reward batch.
    pub prompts: usize,
    /// Total budgets, in units of the per-symbol noise reference.
    pub budgets: Vec<f64>,
    /// Frozen held-out traces for the final comparison.
    pub eval_traces: usize,
    pub spend_remainder_on_last_block: bool,
    pub ppo: PpoConfig,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            f_c: 0.5,
            snr_db: 10.0,
            channel: ChannelKind::RayleighBlock,
            block_length: 8,
            prompts: 8,
            budgets: vec![1.0, 2.0, 4.0],
            eval_traces: 100,
            spend_remainder_on_last_block: true,
            ppo: PpoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: GenConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub autoencoder: AeTrainConfig,
    #[serde(default)]
    pub denoiser: DenoiserTrainConfig,
    #[serde(default)]
    pub codec: CodecSection,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub power: PowerConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Desk => GenConfig::desk(),
            Preset::PaperArithmetic => GenConfig::paper_arithmetic(),
        };
        let mut codec = CodecSection::default();
        if preset == Preset::PaperArithmetic {
            codec.train.bottleneck = 9000;
        }
        ExperimentConfig {
            preset,
            seed: 7,
            model,
            data: DataConfig::default(),
            autoencoder: AeTrainConfig::default(),
            denoiser: DenoiserTrainConfig::default(),
            codec,
            sweep: SweepConfig::default(),
            power: PowerConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Deterministic TOML rendering; field order follows the structs.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        short_hash(self.canonical().as_bytes())
    }

    /// Hash of the sections that determine the trained models. Sweep and
    /// power settings can change without invalidating a bundle.
    pub fn bundle_hash(&self) -> String {
        let training = (self.preset, self.seed, &self.model, &self.data, &self.autoencoder, &self.denoiser, &self.codec);
        short_hash(serde_json::to_string(&training).expect("config serializes").as_bytes())
    }

    /// Checks every cross-component contract before anything runs.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.model.validate()?;
        let rate_ok = |f: f64| f > 0.0 && f < 1.0;
        if self.codec.rates.is_empty() || !self.codec.rates.iter().all(|&f| rate_ok(f)) {
            return bad(format!("codec rates {:?} must be non-empty and inside (0, 1)", self.codec.rates));
        }
        if self.codec.train_snrs_db.is_empty() || self.codec.train_snrs_db.iter().any(|s| s.is_nan()) {
            return bad("codec training SNRs must be a non-empty list of numbers".into());
        }
        let deployed = |f: f64| self.codec.rates.iter().any(|&r| (r - f).abs() < 1e-9);
        if let Some(f) = self.sweep.rates.iter().find(|&&f| !deployed(f)) {
            return bad(format!("sweep rate {f} has no codec; add it to codec.rates"));
        }
        if !deployed(self.power.f_c) {
            return bad(format!("power f_c {} has no codec; add it to codec.rates", self.power.f_c));
        }
        if self.sweep.block_length == 0 || self.power.block_length == 0 || self.codec.train.block_length == 0 {
            return bad("block lengths must be positive".into());
        }
        if self.sweep.prompts < 2 || self.power.prompts < 2 {
            return bad("the FID-proxy needs at least two prompts per batch".into());
        }
        if self.sweep.trials == 0 || self.sweep.modes.is_empty() || self.sweep.snrs_db.iter().any(|s| s.is_nan()) {
            return bad("sweep needs modes, trials and numeric SNRs".into());
        }
        if self.power.budgets.is_empty() || self.power.budgets.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
            return bad(format!("power budgets {:?} must be positive", self.power.budgets));
        }
        if self.power.eval_traces == 0 {
            return bad("power evaluation needs at least one trace".into());
        }
        self.power.ppo.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.data.per_prompt == 0 || self.data.codec_samples_per_prompt == 0 {
            return bad("data counts must be positive".into());
        }
        Ok(())
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
