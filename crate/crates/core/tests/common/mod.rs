//! Shared fixtures for the integration tests.

use meg::experiment::{ExperimentConfig, Preset};

/// Desk architecture with minimal training and evaluation sizes.
pub fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.data.per_prompt = 1;
    cfg.data.codec_samples_per_prompt = 1;
    cfg.autoencoder.epochs = 2;
    cfg.denoiser.iterations = 20;
    cfg.codec.rates = vec![0.3, 0.5];
    cfg.codec.train_snrs_db = vec![0.0, 30.0];
    cfg.codec.train.epochs = 2;
    cfg.sweep.rates = vec![0.5];
    cfg.sweep.snrs_db = vec![-10.0, 30.0];
    cfg.sweep.trials = 2;
    cfg.sweep.prompts = 4;
    cfg.power.budgets = vec![1.0];
    cfg.power.prompts = 4;
    cfg.power.eval_traces = 6;
    cfg.power.ppo.iterations = 2;
    cfg.power.ppo.episodes_per_batch = 4;
    cfg.power.ppo.epochs = 2;
    cfg.power.ppo.validation_traces = 3;
    cfg.power.ppo.eval_every = 1;
    cfg
}
