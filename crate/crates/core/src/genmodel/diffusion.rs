//! Forward noising, the noise-prediction objective and the DDIM reverse step.
//!
//! `alpha_bar[t]` is the cumulative product of `1 - beta_s` for `s <= t`,
//! with `alpha_bar[0] = 1`. Sampling arithmetic runs in `f64`.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::autoencoder::TrainLog;
use super::prompt::PromptEmbedding;
use super::{check_len, GenConfig, GenError};
use crate::nn::{clip_global_norm, Activation, Adam, Mlp, ModelFile, Tensor};
use crate::rng::{normal_vec, stream_rng};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `1e-4 * 50/T` to `0.02 * 50/T`.
    pub fn linear(steps: usize) -> Result<Self, GenError> {
        if steps == 0 {
            return Err(GenError::Schedule("at least one diffusion step is required".into()));
        }
        let scale = 50.0 / steps as f64;
        let (lo, hi) = (1e-4 * scale, 0.02 * scale);
        let betas = (0..steps)
            .map(|i| match steps {
                1 => lo,
                _ => lo + (hi - lo) * i as f64 / (steps - 1) as f64,
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, GenError> {
        if betas.is_empty() {
            return Err(GenError::Schedule("empty beta schedule".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(GenError::Schedule("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(GenError::Schedule("betas must be non-decreasing".into()));
        }
        let mut alpha_bar = vec![1.0];
        for b in &betas {
            alpha_bar.push(alpha_bar.last().expect("non-empty") * (1.0 - b));
        }
        let sigmas = vec![0.0; betas.len() + 1];
        Ok(NoiseSchedule { betas, alpha_bar, sigmas })
    }

    /// Sets `sigma_t = eta * sqrt((1 - ab[t-1]) / (1 - ab[t])) * sqrt(1 - ab[t] / ab[t-1])`;
    /// `eta = 0` is deterministic sampling.
    pub fn with_eta(mut self, eta: f64) -> Self {
        for t in 1..=self.steps() {
            let (a, ap) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
            self.sigmas[t] = eta * ((1.0 - ap) / (1.0 - a)).sqrt() * (1.0 - a / ap).sqrt();
        }
        self
    }

    /// Overrides one `sigma_t`.
    pub fn set_sigma(&mut self, t: usize, sigma: f64) -> Result<(), GenError> {
        self.check_t(t, 1)?;
        self.sigmas[t] = sigma;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    fn check_t(&self, t: usize, min: usize) -> Result<(), GenError> {
        if t < min || t > self.steps() {
            return Err(GenError::Argument(format!(
                "step {t} outside [{min}, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Anything that predicts the noise in `z_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &[f32], t: usize, prompt: &PromptEmbedding) -> Result<Vec<f32>, GenError>;
}

/// Predicts zero noise everywhere; the trivial baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_noise(&self, z_t: &[f32], _t: usize, _p: &PromptEmbedding) -> Result<Vec<f32>, GenError> {
        Ok(vec![0.0; z_t.len()])
    }
}

/// `z_t = sqrt(ab_t) * z0 + sqrt(1 - ab_t) * noise`.
pub fn diffuse_forward(z0: &[f32], t: usize, noise: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>, GenError> {
    schedule.check_t(t, 0)?;
    check_len("noise", z0.len(), noise.len())?;
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z0.iter().zip(noise).map(|(&z, &n)| (sa * z as f64 + sn * n as f64) as f32).collect())
}

fn z0_from_noise(z_t: &[f32], eps: &[f32], a: f64) -> Vec<f64> {
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    z_t.iter().zip(eps).map(|(&z, &e)| (z as f64 - sn * e as f64) / sa).collect()
}

/// `(z_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)`.
pub fn predict_z0(
    model: &impl NoisePredictor,
    z_t: &[f32],
    t: usize,
    prompt: &PromptEmbedding,
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>, GenError> {
    schedule.check_t(t, 1)?;
    let eps = model.predict_noise(z_t, t, prompt)?;
    check_len("predicted noise", z_t.len(), eps.len())?;
    Ok(z0_from_noise(z_t, &eps, schedule.alpha_bar(t)).into_iter().map(|v| v as f32).collect())
}

/// One reverse step `z_t -> z_{t-1}`:
/// `sqrt(ab_{t-1}) * z0_hat + sqrt(1 - ab_{t-1} - sigma_t^2) * eps + sigma_t * noise`.
///
/// `step_noise` is required when `sigma_t > 0` and ignored otherwise.
pub fn ddim_step(
    model: &impl NoisePredictor,
    z_t: &[f32],
    t: usize,
    prompt: &PromptEmbedding,
    schedule: &NoiseSchedule,
    step_noise: Option<&[f32]>,
) -> Result<Vec<f32>, GenError> {
    schedule.check_t(t, 1)?;
    let sigma = schedule.sigma(t);
    let prev = schedule.alpha_bar(t - 1);
    let radicand = 1.0 - prev - sigma * sigma;
    if radicand < 0.0 {
        return Err(GenError::Schedule(format!(
            "sigma_{t}^2 = {} exceeds 1 - alpha_bar_{} = {}",
            sigma * sigma,
            t - 1,
            1.0 - prev
        )));
    }
    let eps = model.predict_noise(z_t, t, prompt)?;
    check_len("predicted noise", z_t.len(), eps.len())?;
    let z0 = z0_from_noise(z_t, &eps, schedule.alpha_bar(t));
    let noise = match step_noise {
        Some(n) => {
            check_len("step noise", z_t.len(), n.len())?;
            Some(n)
        }
        None if sigma > 0.0 => {
            return Err(GenError::Argument(format!("sigma_{t} > 0 requires step noise")))
        }
        None => None,
    };
    let (sp, se) = (prev.sqrt(), radicand.sqrt());
    Ok((0..z_t.len())
        .map(|i| {
            let mut v = sp * z0[i] + se * eps[i] as f64;
            if let Some(n) = noise {
                v += sigma * n[i] as f64;
            }
            v as f32
        })
        .collect())
}

/// Runs the reverse chain from `t = T` down to `t = 1`, drawing step noise
/// from `rng` only where `sigma_t > 0`.
pub fn generate_latent(
    model: &impl NoisePredictor,
    prompt: &PromptEmbedding,
    initial_noise: &[f32],
    schedule: &NoiseSchedule,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Vec<f32>, GenError> {
    let mut z = initial_noise.to_vec();
    let mut rng = rng;
    for t in (1..=schedule.steps()).rev() {
        let noise = match (&mut rng, schedule.sigma(t) > 0.0) {
            (Some(r), true) => Some(normal_vec(r, z.len())),
            _ => None,
        };
        z = ddim_step(model, &z, t, prompt, schedule, noise.as_deref())?;
    }
    Ok(z)
}

/// Dense noise predictor on `[z_t, time embedding, pooled prompt]`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: Mlp,
    pub latent_len: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
}

impl Denoiser {
    pub fn new(cfg: &GenConfig, rng: &mut impl Rng) -> Self {
        let z = cfg.latent_dims().len();
        let h = cfg.denoiser_hidden;
        let input = z + cfg.time_dim + cfg.embed_dim;
        Denoiser {
            net: Mlp::dense_stack("denoiser", &[input, h, h, z], Activation::Relu, Activation::None, rng),
            latent_len: z,
            time_dim: cfg.time_dim,
            embed_dim: cfg.embed_dim,
        }
    }

    /// Sinusoidal embedding of the step index.
    pub fn time_embedding(&self, t: usize) -> Vec<f32> {
        let half = self.time_dim / 2;
        let mut out = Vec::with_capacity(self.time_dim);
        for i in 0..half {
            let freq = (-(100f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(100f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).cos() as f32);
        }
        out
    }

    fn input_row(&self, z_t: &[f32], t: usize, pooled: &[f32]) -> Result<Vec<f32>, GenError> {
        check_len("latent", self.latent_len, z_t.len())?;
        check_len("prompt embedding", self.embed_dim, pooled.len())?;
        let mut row = Vec::with_capacity(z_t.len() + self.time_dim + pooled.len());
        row.extend_from_slice(z_t);
        row.extend(self.time_embedding(t));
        row.extend_from_slice(pooled);
        Ok(row)
    }

    pub fn to_model(&self) -> ModelFile {
        ModelFile::new()
            .with_meta("kind", "denoiser")
            .with_meta("time_dim", self.time_dim)
            .with_network(self.net.clone())
    }

    pub fn from_model(mut file: ModelFile, cfg: &GenConfig) -> Result<Self, GenError> {
        let net = file.take_network("denoiser")?;
        let d = Denoiser {
            net,
            latent_len: cfg.latent_dims().len(),
            time_dim: cfg.time_dim,
            embed_dim: cfg.embed_dim,
        };
        if d.net.input_size() != Some(d.latent_len + d.time_dim + d.embed_dim) {
            return Err(GenError::Argument("denoiser file does not match the configuration".into()));
        }
        Ok(d)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, z_t: &[f32], t: usize, prompt: &PromptEmbedding) -> Result<Vec<f32>, GenError> {
        let row = self.input_row(z_t, t, &prompt.pooled())?;
        Ok(self.net.infer(&Tensor::vector(row))?.into_data())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Iterations averaged into each logged loss.
    pub log_every: usize,
    /// Derived from the experiment seed, not configured.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            iterations: 3000,
            batch_size: 64,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            log_every: 50,
            seed: 0,
        }
    }
}

/// Minimizes `E |eps - eps_theta(z_t, prompt, t)|^2` with `t` uniform in
/// `[1, T]`. `latents[i]` is a clean latent for `prompts[i]`.
pub fn train_denoiser(
    latents: &[Vec<f32>],
    prompts: &[&PromptEmbedding],
    schedule: &NoiseSchedule,
    gen: &GenConfig,
    cfg: &DenoiserTrainConfig,
) -> Result<(Denoiser, TrainLog), GenError> {
    if latents.is_empty() || latents.len() != prompts.len() {
        return Err(GenError::Argument(format!(
            "{} latents for {} prompts",
            latents.len(),
            prompts.len()
        )));
    }
    if cfg.iterations == 0 || cfg.batch_size == 0 {
        return Err(GenError::Argument("empty denoiser training schedule".into()));
    }
    let mut model = Denoiser::new(gen, &mut stream_rng(cfg.seed, 0xD0));
    let pooled: Vec<Vec<f32>> = prompts.iter().map(|p| p.pooled()).collect();
    let mut rng = stream_rng(cfg.seed, 0xD1);
    let mut opt = Adam::new(cfg.learning_rate);
    let index: Vec<usize> = (0..latents.len()).collect();
    let mut log = TrainLog::default();
    let mut window = (0.0, 0usize);
    for it in 0..cfg.iterations {
        let mut rows = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size * model.latent_len);
        for _ in 0..cfg.batch_size {
            let &i = index.choose(&mut rng).expect("non-empty");
            let t = rng.random_range(1..=schedule.steps());
            let eps = normal_vec(&mut rng, model.latent_len);
            let z_t = diffuse_forward(&latents[i], t, &eps, schedule)?;
            rows.push(model.input_row(&z_t, t, &pooled[i])?);
            targets.extend(eps);
        }
        let out = model.net.forward(&Tensor::from_rows(&rows)?)?;
        let n = out.len() as f64;
        let loss: f64 = out.data().iter().zip(&targets).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(GenError::Training(format!("denoiser loss diverged at iteration {it}")));
        }
        let g: Vec<f32> = out.data().iter().zip(&targets).map(|(a, b)| (2.0 / n) as f32 * (a - b)).collect();
        let (_, mut grads) = model.net.backward(&Tensor::new(out.shape().to_vec(), g)?)?;
        clip_global_norm(&mut grads, cfg.clip_norm);
        opt.step(model.net.params_mut(), &grads)?;
        window.0 += loss;
        window.1 += 1;
        if window.1 == cfg.log_every.max(1) || it + 1 == cfg.iterations {
            log.losses.push(window.0 / window.1 as f64);
            window = (0.0, 0);
        }
    }
    model.net.clear_cache();
    Ok((model, log))
}

/// Monte-Carlo estimate of the noise-prediction loss (mean squared error per
/// element) with `draws` `(t, noise)` samples per latent.
pub fn denoiser_loss(
    model: &impl NoisePredictor,
    latents: &[Vec<f32>],
    prompts: &[&PromptEmbedding],
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64, GenError> {
    let mut rng = stream_rng(seed, 0xD2);
    let (mut total, mut count) = (0.0, 0usize);
    for (z0, p) in latents.iter().zip(prompts) {
        for _ in 0..draws {
            let t = rng.random_range(1..=schedule.steps());
            let eps = normal_vec(&mut rng, z0.len());
            let z_t = diffuse_forward(z0, t, &eps, schedule)?;
            let pred = model.predict_noise(&z_t, t, p)?;
            total += pred.iter().zip(&eps).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            count += z0.len();
        }
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::genmodel::embed_prompt;

    /// Returns a fixed noise vector regardless of input.
    pub(crate) struct ExactNoise(pub Vec<f32>);

    impl NoisePredictor for ExactNoise {
        fn predict_noise(&self, _z: &[f32], _t: usize, _p: &PromptEmbedding) -> Result<Vec<f32>, GenError> {
            Ok(self.0.clone())
        }
    }

    fn prompt() -> PromptEmbedding {
        embed_prompt("bright small circle left", 8, 32).unwrap()
    }

    #[test]
    fn default_schedule_is_sane() {
        for steps in [1, 2, 10, 50, 1000] {
            let s = NoiseSchedule::linear(steps).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            for t in 1..=steps {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(1.0 - s.alpha_bar(t - 1) - s.sigma(t).powi(2) >= 0.0);
            }
        }
        let s = NoiseSchedule::linear(10).unwrap().with_eta(1.0);
        for t in 1..=10 {
            assert!(1.0 - s.alpha_bar(t - 1) - s.sigma(t).powi(2) >= -1e-15);
        }
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.05]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0, 0.05]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5, 1.0]).is_err());
    }

    #[test]
    fn forward_edge_cases() {
        let s = NoiseSchedule::linear(10).unwrap();
        let z0 = vec![0.3, -1.2, 2.0];
        assert_eq!(diffuse_forward(&z0, 0, &[5.0, 5.0, 5.0], &s).unwrap(), z0);
        let zt = diffuse_forward(&z0, 4, &[0.0; 3], &s).unwrap();
        for (a, b) in zt.iter().zip(&z0) {
            assert!((a - s.alpha_bar(4).sqrt() as f32 * b).abs() < 1e-7);
        }
        assert!(diffuse_forward(&z0, 11, &[0.0; 3], &s).is_err());
    }

    #[test]
    fn forward_variance_matches_schedule() {
        let s = NoiseSchedule::linear(10).unwrap();
        let n = 100_000;
        let mut rng = stream_rng(4, 0);
        let noise = normal_vec(&mut rng, n);
        let zt = diffuse_forward(&vec![0.0; n], 7, &noise, &s).unwrap();
        let var = zt.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n as f64;
        let expected = 1.0 - s.alpha_bar(7);
        assert!((var / expected - 1.0).abs() < 0.02, "{var} vs {expected}");
    }

    #[test]
    fn exact_noise_inverts_forward() {
        let s = NoiseSchedule::linear(10).unwrap();
        let mut rng = stream_rng(8, 0);
        let z0 = normal_vec(&mut rng, 64);
        let eps = normal_vec(&mut rng, 64);
        for t in 1..=10 {
            let zt = diffuse_forward(&z0, t, &eps, &s).unwrap();
            let back = predict_z0(&ExactNoise(eps.clone()), &zt, t, &prompt(), &s).unwrap();
            assert!(back.iter().zip(&z0).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }

    #[test]
    fn zero_predictor_rescales() {
        let s = NoiseSchedule::linear(10).unwrap();
        let zt = vec![0.5, -2.0];
        let z0 = predict_z0(&ZeroPredictor, &zt, 3, &prompt(), &s).unwrap();
        let k = s.alpha_bar(3).sqrt();
        assert!((z0[0] as f64 - 0.5 / k).abs() < 1e-6);
        assert!((z0[1] as f64 + 2.0 / k).abs() < 1e-6);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1).unwrap();
        let z1 = vec![0.9, -0.1];
        let z0 = ddim_step(&ZeroPredictor, &z1, 1, &prompt(), &s, None).unwrap();
        let k = s.alpha_bar(1).sqrt();
        assert!((z0[0] as f64 - 0.9 / k).abs() < 1e-6);
        let gen = generate_latent(&ZeroPredictor, &prompt(), &z1, &s, None).unwrap();
        assert_eq!(gen, z0);
    }

    #[test]
    fn oversized_sigma_is_schedule_error() {
        let mut s = NoiseSchedule::linear(10).unwrap();
        s.set_sigma(1, 0.5).unwrap();
        let r = ddim_step(&ZeroPredictor, &[0.0], 1, &prompt(), &s, Some(&[0.0]));
        assert!(matches!(r, Err(GenError::Schedule(_))));
    }

    #[test]
    fn stochastic_step_requires_noise() {
        let s = NoiseSchedule::linear(10).unwrap().with_eta(1.0);
        assert!(ddim_step(&ZeroPredictor, &[0.0], 5, &prompt(), &s, None).is_err());
        let mut rng = stream_rng(0, 0);
        let a = generate_latent(&ZeroPredictor, &prompt(), &[0.1, 0.2], &s, Some(&mut rng)).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn training_reduces_loss_and_beats_zero() {
        let gen = GenConfig::desk();
        let prompts: Vec<PromptEmbedding> = ["bright small circle left", "dim large square right"]
            .iter()
            .map(|p| embed_prompt(p, 8, 32).unwrap())
            .collect();
        let mut rng = stream_rng(2, 0);
        let targets: Vec<Vec<f32>> = (0..2).map(|_| normal_vec(&mut rng, 128)).collect();
        let latents: Vec<Vec<f32>> = (0..16).map(|i| targets[i % 2].clone()).collect();
        let refs: Vec<&PromptEmbedding> = (0..16).map(|i| &prompts[i % 2]).collect();
        let s = NoiseSchedule::linear(10).unwrap();
        let cfg = DenoiserTrainConfig { iterations: 400, batch_size: 32, log_every: 20, ..Default::default() };
        let (model, log) = train_denoiser(&latents, &refs, &s, &gen, &cfg).unwrap();
        let tail = &log.losses[log.losses.len() * 9 / 10..];
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(tail_mean < log.losses[0]);
        let trained = denoiser_loss(&model, &latents, &refs, &s, 20, 77).unwrap();
        let zero = denoiser_loss(&ZeroPredictor, &latents, &refs, &s, 20, 77).unwrap();
        assert!(trained < zero, "{trained} vs {zero}");
        let oracle_latent = &latents[0];
        let mut rng = stream_rng(5, 0);
        let eps = normal_vec(&mut rng, 128);
        let zt = diffuse_forward(oracle_latent, 3, &eps, &s).unwrap();
        let perfect = ExactNoise(eps.clone()).predict_noise(&zt, 3, refs[0]).unwrap();
        assert_eq!(perfect, eps);
    }

    #[test]
    fn generation_is_deterministic_and_noise_sensitive() {
        let gen = GenConfig::desk();
        let model = Denoiser::new(&gen, &mut stream_rng(0, 0));
        let s = NoiseSchedule::linear(10).unwrap();
        let a = normal_vec(&mut stream_rng(1, 0), 128);
        let b = normal_vec(&mut stream_rng(2, 0), 128);
        let za = generate_latent(&model, &prompt(), &a, &s, None).unwrap();
        assert_eq!(za, generate_latent(&model, &prompt(), &a, &s, None).unwrap());
        let zb = generate_latent(&model, &prompt(), &b, &s, None).unwrap();
        assert!(za.iter().zip(&zb).any(|(x, y)| x != y));
    }
}
