//! Per-block transmit power allocation under a total budget, learned with
//! PPO against a terminal FID-proxy reward.
//!
//! One episode delivers a batch of seeds over a shared block-fading trace.
//! At block `t` the agent sees that block's symbols, the gain `h_t`, the
//! fraction of budget left and its position in the frame, and picks
//! `a_t in [0, 1]`; the block is sent with `p_t = min(a_t p_max, remaining)`.
//! After the last block the UE decodes every image and the episode earns
//! `-FID` against the perfect-channel images.

use std::cmp::Ordering;
use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::channel::{sample_fading_trace, snr_to_noise_std, ChannelError, ChannelKind, ChannelModel, FadingTrace};
use crate::genmodel::PixelImage;
use crate::metrics::{fid_from_features, MetricError};
use crate::nn::{clip_global_norm, Activation, Adam, ModelFile, Mlp, NnError, Tensor};
use crate::protocol::{es_handle_request, transmit_frame, ue_receive, Deployment, GenerationRequest, ProtocolError, SeedFrame};
use crate::rng::{derive_seed, stream_rng};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Debug, Error)]
pub enum PowerError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, PowerError>;

/// `min(a * p_max, remaining)`. The clamp hands a too-greedy block whatever
/// budget is left.
pub fn apply_power(action: f64, remaining: f64, p_max: f64) -> f64 {
    (action.clamp(0.0, 1.0) * p_max).min(remaining).max(0.0)
}

/// Shewchuk's non-overlapping partials: their exact sum equals the exact sum
/// of `values`, they increase in magnitude and none is zero.
fn partials(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut parts: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..parts.len() {
            let mut y = parts[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                parts[i] = lo;
                i += 1;
            }
            x = hi;
        }
        parts.truncate(i);
        parts.push(x);
    }
    parts.retain(|&p| p != 0.0);
    parts
}

/// Correctly rounded sum.
pub fn fsum(values: impl IntoIterator<Item = f64>) -> f64 {
    let parts = partials(values);
    let Some((&top, rest)) = parts.split_last() else {
        return 0.0;
    };
    let mut hi = top;
    let mut lo = 0.0;
    let mut k = rest.len();
    while k > 0 {
        k -= 1;
        let x = hi;
        let y = rest[k];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Round-half-even correction when the tail pushes past a tie.
    if k > 0 && ((lo < 0.0 && rest[k - 1] < 0.0) || (lo > 0.0 && rest[k - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Sign of the exact real sum.
pub fn exact_sign(values: impl IntoIterator<Item = f64>) -> Ordering {
    match partials(values).last() {
        None => Ordering::Equal,
        Some(&p) if p > 0.0 => Ordering::Greater,
        Some(_) => Ordering::Less,
    }
}

/// Tracks spending against `p_max` in exact arithmetic.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    p_max: f64,
    spent: Vec<f64>,
}

impl BudgetLedger {
    pub fn new(p_max: f64) -> Result<Self> {
        if !(p_max.is_finite() && p_max > 0.0) {
            return Err(PowerError::Argument(format!("power budget {p_max} must be positive")));
        }
        Ok(BudgetLedger { p_max, spent: Vec::new() })
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn spent(&self) -> &[f64] {
        &self.spent
    }

    pub fn remaining(&self) -> f64 {
        fsum(std::iter::once(self.p_max).chain(self.spent.iter().map(|p| -p))).clamp(0.0, self.p_max)
    }

    /// Whether adding `p` keeps the exact total within budget.
    pub fn admits(&self, p: f64) -> bool {
        exact_sign(self.spent.iter().copied().chain([p, -self.p_max])) != Ordering::Greater
    }

    /// Records `request` clamped to what is left. Rounding in `remaining`
    /// can overshoot by an ulp, so the amount is nudged down until the
    /// exact total fits.
    pub fn spend(&mut self, request: f64) -> f64 {
        let mut p = if request.is_finite() { request.clamp(0.0, self.remaining()) } else { 0.0 };
        while p > 0.0 && !self.admits(p) {
            p = p.next_down().max(0.0);
        }
        self.spent.push(p);
        p
    }

    pub fn is_feasible(&self) -> bool {
        self.admits(0.0)
    }
}

/// Budget checks made while recording episodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetAudit {
    pub episodes: u64,
    pub steps: u64,
    pub violations: u64,
}

impl BudgetAudit {
    pub fn merge(&mut self, other: BudgetAudit) {
        self.episodes += other.episodes;
        self.steps += other.steps;
        self.violations += other.violations;
    }

    fn record(&mut self, episode: &EpisodeRecord) {
        self.episodes += 1;
        let mut spent = Vec::with_capacity(episode.transitions.len());
        for t in &episode.transitions {
            spent.push(t.power);
            self.steps += 1;
            if exact_sign(spent.iter().copied().chain([-episode.p_max])) == Ordering::Greater {
                self.violations += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerMdpState {
    /// This block's symbols, zero-padded to the block length.
    pub block: Vec<f64>,
    pub gain: f64,
    pub remaining: f64,
    pub step: usize,
}

impl PowerMdpState {
    /// Network input: block symbols, gain, remaining fraction, progress.
    pub fn features(&self, p_max: f64, blocks: usize) -> Vec<f64> {
        let mut f = self.block.clone();
        f.push(self.gain);
        f.push(self.remaining / p_max);
        f.push(self.step as f64 / blocks.max(1) as f64);
        f
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: PowerMdpState,
    pub observation: Vec<f64>,
    /// Squashed action in `[0, 1]`.
    pub action: f64,
    /// Pre-squash Gaussian draw; NaN for fixed policies.
    pub raw_action: f64,
    pub log_prob: f64,
    pub power: f64,
    pub reward: f64,
    pub next_state: Option<PowerMdpState>,
    pub done: bool,
    /// The power was dictated by the environment, not the action.
    pub forced: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub transitions: Vec<Transition>,
    pub p_max: f64,
    pub gains: Vec<f64>,
    pub fid: f64,
}

impl EpisodeRecord {
    pub fn terminal_reward(&self) -> f64 {
        self.transitions.last().map_or(0.0, |t| t.reward)
    }

    pub fn powers(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.power).collect()
    }

    /// `G_t = sum_k gamma^(k-t) r_k`.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let mut g = 0.0;
        let mut out = vec![0.0; self.transitions.len()];
        for (i, t) in self.transitions.iter().enumerate().rev() {
            g = t.reward + gamma * g;
            out[i] = g;
        }
        out
    }
}

/// What a policy chose for one block.
#[derive(Debug, Clone, Copy)]
pub struct Decision {
    pub action: f64,
    pub raw: f64,
    pub log_prob: f64,
}

pub trait PowerPolicy: Sync {
    /// `explore` is `None` for deterministic evaluation.
    fn decide(&self, observation: &[f64], blocks: usize, explore: Option<&mut dyn RngCore>) -> Result<Decision>;
}

/// `a_t = 1 / N` on every block.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

impl PowerPolicy for UniformPolicy {
    fn decide(&self, _: &[f64], blocks: usize, _: Option<&mut dyn RngCore>) -> Result<Decision> {
        Ok(Decision { action: 1.0 / blocks.max(1) as f64, raw: f64::NAN, log_prob: 0.0 })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerEnvConfig {
    pub f_c: f64,
    pub block_length: usize,
    pub snr_db: f64,
    pub channel: ChannelKind,
    pub p_max: f64,
    pub prompts: Vec<String>,
    /// Seeds the initial diffusion noise of each evaluation prompt.
    pub noise_seed: u64,
    /// The final block always uses whatever budget is left.
    pub spend_remainder_on_last_block: bool,
}

/// The seeds to deliver plus the reference images they are scored against.
#[derive(Debug, Clone)]
pub struct PowerEnv<'a> {
    deploy: &'a Deployment,
    cfg: PowerEnvConfig,
    frames: Vec<SeedFrame>,
    truth: Vec<PixelImage>,
    truth_features: Vec<Vec<f64>>,
    noise_std: f64,
    blocks: usize,
}

impl<'a> PowerEnv<'a> {
    pub fn new(deploy: &'a Deployment, cfg: PowerEnvConfig) -> Result<Self> {
        if cfg.prompts.len() < 2 {
            return Err(PowerError::Argument("the FID reward needs at least two prompts".into()));
        }
        if cfg.block_length == 0 {
            return Err(PowerError::Argument("block length must be positive".into()));
        }
        BudgetLedger::new(cfg.p_max)?;
        let link = cfg.snr_db.is_finite().then_some(cfg.snr_db);
        let mut frames = Vec::with_capacity(cfg.prompts.len());
        let mut latents = Vec::with_capacity(cfg.prompts.len());
        for (i, prompt) in cfg.prompts.iter().enumerate() {
            let req = GenerationRequest {
                prompt: prompt.clone(),
                f_c: cfg.f_c,
                image: deploy.gen.image,
                noise_seed: derive_seed(cfg.noise_seed, &format!("prompt/{i}")),
                link_snr_db: link,
            };
            let out = es_handle_request(deploy, &req, cfg.block_length)?;
            latents.push(out.latent.values);
            frames.push(out.frame);
        }
        let truth = deploy
            .autoencoder
            .decode_batch(&latents.iter().map(|z| z.as_slice()).collect::<Vec<_>>())
            .map_err(ProtocolError::from)?;
        let truth_features = deploy.extractor.features(&truth)?;
        let blocks = frames[0].payload.len().div_ceil(cfg.block_length);
        let noise_std = snr_to_noise_std(cfg.snr_db, 1.0);
        Ok(PowerEnv { deploy, cfg, frames, truth, truth_features, noise_std, blocks })
    }

    pub fn config(&self) -> &PowerEnvConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn observation_len(&self) -> usize {
        self.cfg.block_length + 3
    }

    pub fn truth(&self) -> &[PixelImage] {
        &self.truth
    }

    pub fn channel_model(&self) -> Result<ChannelModel> {
        Ok(ChannelModel::new(self.cfg.channel, self.cfg.block_length, self.noise_std)?)
    }

    /// `count` traces of `blocks()` gains each, concatenated.
    pub fn sample_traces(&self, count: usize, seed: u64) -> Result<FadingTrace> {
        Ok(sample_fading_trace(&self.channel_model()?, count * self.blocks, seed))
    }

    fn state_at(&self, step: usize, gain: f64, remaining: f64) -> PowerMdpState {
        let b = self.cfg.block_length;
        let payload = &self.frames[0].payload;
        let mut block = vec![0.0; b];
        for (dst, src) in block.iter_mut().zip(payload.iter().skip(step * b).take(b)) {
            *dst = *src as f64;
        }
        PowerMdpState { block, gain, remaining, step }
    }

    /// Images the UE decodes when every seed crosses `gains` with `powers`.
    /// Image `i` draws channel noise from stream `i` of `noise_seed`.
    pub fn deliver(&self, gains: &[f64], powers: &[f64], noise_seed: u64) -> Result<Vec<PixelImage>> {
        self.frames
            .iter()
            .enumerate()
            .map(|(i, frame)| {
                let mut rng = stream_rng(noise_seed, i as u64);
                let rx = transmit_frame(frame, gains, powers, self.noise_std, &mut rng, false)?;
                Ok(ue_receive(self.deploy, &frame.header_bytes(), &rx)?.image)
            })
            .collect()
    }

    /// `-FID` of the delivered batch against the perfect-channel images.
    pub fn terminal_reward(&self, images: &[PixelImage]) -> Result<(f64, f64)> {
        let fid = fid_from_features(&self.deploy.extractor.features(images)?, &self.truth_features)?;
        if !fid.is_finite() {
            return Err(PowerError::Metric(MetricError::Numeric));
        }
        Ok((-fid, fid))
    }

    /// Plays one episode over `gains` (one gain per block).
    pub fn rollout(
        &self,
        policy: &dyn PowerPolicy,
        gains: &[f64],
        noise_seed: u64,
        mut explore: Option<&mut ChaCha8Rng>,
    ) -> Result<EpisodeRecord> {
        if gains.len() < self.blocks {
            return Err(PowerError::Argument(format!("{} gains for {} blocks", gains.len(), self.blocks)));
        }
        let p_max = self.cfg.p_max;
        let mut ledger = BudgetLedger::new(p_max)?;
        let mut transitions: Vec<Transition> = Vec::with_capacity(self.blocks);
        for t in 0..self.blocks {
            let state = self.state_at(t, gains[t], ledger.remaining());
            let observation = state.features(p_max, self.blocks);
            let d = policy.decide(&observation, self.blocks, explore.as_deref_mut().map(|r| r as &mut dyn RngCore))?;
            let last = t + 1 == self.blocks;
            let forced = last && self.cfg.spend_remainder_on_last_block;
            let request = if forced { ledger.remaining() } else { apply_power(d.action, ledger.remaining(), p_max) };
            let power = ledger.spend(request);
            if let Some(prev) = transitions.last_mut() {
                prev.next_state = Some(state.clone());
            }
            transitions.push(Transition {
                state,
                observation,
                action: d.action,
                raw_action: d.raw,
                log_prob: d.log_prob,
                power,
                reward: 0.0,
                next_state: None,
                done: last,
                forced,
            });
        }
        let powers: Vec<f64> = transitions.iter().map(|t| t.power).collect();
        let images = self.deliver(&gains[..self.blocks], &powers, noise_seed)?;
        let (reward, fid) = self.terminal_reward(&images)?;
        if let Some(last) = transitions.last_mut() {
            last.reward = reward;
        }
        Ok(EpisodeRecord { transitions, p_max, gains: gains[..self.blocks].to_vec(), fid })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub epochs: usize,
    pub episodes_per_batch: usize,
    pub iterations: usize,
    pub hidden: usize,
    pub initial_log_std: f64,
    pub normalize_advantages: bool,
    pub clip_norm: f64,
    /// Validate every this many iterations and keep the best agent.
    pub eval_every: usize,
    pub validation_traces: usize,
    /// Derived from the experiment seed, not configured.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            gamma: 1.0,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            epochs: 10,
            episodes_per_batch: 64,
            iterations: 200,
            hidden: 64,
            initial_log_std: -1.0,
            normalize_advantages: true,
            clip_norm: 0.5,
            eval_every: 10,
            validation_traces: 32,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PowerError::Argument(m));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip range {} outside (0, 1)", self.clip));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("discount {} outside (0, 1]", self.gamma));
        }
        if self.epochs == 0 || self.episodes_per_batch == 0 || self.hidden == 0 {
            return bad("epochs, episodes per batch and hidden width must be positive".into());
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.initial_log_std) {
            return bad(format!("initial log-std {} outside the clamp range", self.initial_log_std));
        }
        Ok(())
    }
}

pub fn gaussian_log_prob(u: f64, mean: f64, log_std: f64) -> f64 {
    let z = (u - mean) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Entropy bonus term: Gaussian entropy measured from the floor policy,
/// `H(sigma) - H(sigma_min) = log sigma - LOG_STD_MIN`.
pub fn entropy_term(log_std: f64) -> f64 {
    log_std - LOG_STD_MIN
}

/// One transition as seen by the loss.
#[derive(Debug, Clone, Copy)]
pub struct LossSample {
    pub ratio: f64,
    pub advantage: f64,
    pub value: f64,
    pub target: f64,
    pub log_std: f64,
}

/// `-mean L_clip + c1 mean (V - G)^2 - c2 mean S`.
pub fn ppo_loss(samples: &[LossSample], cfg: &PpoConfig) -> f64 {
    let n = samples.len().max(1) as f64;
    let (mut surr, mut value, mut ent) = (0.0, 0.0, 0.0);
    for s in samples {
        surr += clipped_surrogate(s.ratio, s.advantage, cfg.clip);
        value += (s.value - s.target).powi(2);
        ent += entropy_term(s.log_std);
    }
    -surr / n + cfg.value_coef * value / n - cfg.entropy_coef * ent / n
}

/// Gaussian actor over the raw action, squashed to `[0, 1]` by
/// `(tanh(u) + 1) / 2`, plus a state-value critic.
#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub actor: Mlp<f64>,
    pub critic: Mlp<f64>,
    pub old_actor: Mlp<f64>,
    /// The critic predicts `(G - value_offset) / value_scale`.
    pub value_offset: f64,
    pub value_scale: f64,
    actor_opt: Adam<f64>,
    critic_opt: Adam<f64>,
}

pub fn squash(u: f64) -> f64 {
    (u.tanh() + 1.0) / 2.0
}

/// Inverse of [`squash`], saturating near the ends.
pub fn unsquash(a: f64) -> f64 {
    (2.0 * a.clamp(1e-6, 1.0 - 1e-6) - 1.0).atanh()
}

impl PpoAgent {
    /// Fresh networks whose initial mean action is the uniform share
    /// `1 / blocks`.
    pub fn new(observation_len: usize, blocks: usize, cfg: &PpoConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "ppo/init"));
        let h = cfg.hidden;
        let mut actor =
            Mlp::dense_stack("actor", &[observation_len, h, h, 2], Activation::Tanh, Activation::None, &mut rng);
        let critic =
            Mlp::dense_stack("critic", &[observation_len, h, h, 1], Activation::Tanh, Activation::None, &mut rng);
        {
            let mut params = actor.params_mut();
            let n = params.len();
            params[n - 2].values.iter_mut().for_each(|w| *w *= 0.01);
            params[n - 1].values[0] = unsquash(1.0 / blocks.max(1) as f64);
            params[n - 1].values[1] = cfg.initial_log_std;
        }
        PpoAgent {
            old_actor: actor.clone(),
            actor,
            critic,
            value_offset: 0.0,
            value_scale: 1.0,
            actor_opt: Adam::new(cfg.actor_lr),
            critic_opt: Adam::new(cfg.critic_lr),
        }
    }

    pub fn observation_len(&self) -> usize {
        self.actor.input_size().unwrap_or(0)
    }

    /// `(mean, clamped log-std)` of the raw-action Gaussian.
    pub fn distribution(&self, observation: &[f64]) -> Result<(f64, f64)> {
        let out = self.actor.infer(&Tensor::matrix(1, observation.len(), observation.to_vec())?)?;
        Ok((out.data()[0], out.data()[1].clamp(LOG_STD_MIN, LOG_STD_MAX)))
    }

    pub fn value(&self, observation: &[f64]) -> Result<f64> {
        let out = self.critic.infer(&Tensor::matrix(1, observation.len(), observation.to_vec())?)?;
        Ok(self.value_offset + self.value_scale * out.data()[0])
    }

    /// Fixes the critic's output scale from a first batch of returns.
    pub fn calibrate_values(&mut self, returns: &[f64]) {
        if returns.is_empty() {
            return;
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
        self.value_offset = mean;
        self.value_scale = var.sqrt().max(1e-6);
    }

    pub fn to_model(&self) -> ModelFile {
        ModelFile::new()
            .with_meta("kind", "ppo-agent")
            .with_meta("value_offset", self.value_offset)
            .with_meta("value_scale", self.value_scale)
            .with_network(self.actor.cast())
            .with_network(self.critic.cast())
    }

    pub fn from_model(mut file: ModelFile, cfg: &PpoConfig) -> Result<Self> {
        let parse = |v: &str| v.parse::<f64>().map_err(|e| PowerError::Argument(format!("bad agent metadata: {e}")));
        let value_offset = parse(file.meta("value_offset")?)?;
        let value_scale = parse(file.meta("value_scale")?)?;
        let actor: Mlp<f64> = file.take_network("actor")?.cast();
        let critic: Mlp<f64> = file.take_network("critic")?.cast();
        Ok(PpoAgent {
            old_actor: actor.clone(),
            actor,
            critic,
            value_offset,
            value_scale,
            actor_opt: Adam::new(cfg.actor_lr),
            critic_opt: Adam::new(cfg.critic_lr),
        })
    }

    /// Copies the current actor into the old-policy snapshot.
    pub fn snapshot(&mut self) {
        self.old_actor = self.actor.clone();
    }

    /// `pi(u | s) / pi_old(u | s)` for every stored decision.
    pub fn ratios(&self, observations: &[Vec<f64>], raw: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::from_rows(observations)?;
        let now = self.actor.infer(&x)?;
        let old = self.old_actor.infer(&x)?;
        Ok(raw
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let (m, s) = (now.row(i)[0], now.row(i)[1].clamp(LOG_STD_MIN, LOG_STD_MAX));
                let (mo, so) = (old.row(i)[0], old.row(i)[1].clamp(LOG_STD_MIN, LOG_STD_MAX));
                (gaussian_log_prob(u, m, s) - gaussian_log_prob(u, mo, so)).exp()
            })
            .collect())
    }
}

impl PowerPolicy for PpoAgent {
    fn decide(&self, observation: &[f64], _: usize, explore: Option<&mut dyn RngCore>) -> Result<Decision> {
        let (mean, log_std) = self.distribution(observation)?;
        let raw = match explore {
            Some(rng) => {
                let eps: f64 = StandardNormal.sample(rng);
                mean + log_std.exp() * eps
            }
            None => mean,
        };
        Ok(Decision { action: squash(raw), raw, log_prob: gaussian_log_prob(raw, mean, log_std) })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub epochs_run: usize,
    pub aborted: bool,
}

/// Per-transition quantities frozen at the start of an update.
#[derive(Debug, Clone)]
struct UpdateBatch {
    x: Tensor<f64>,
    raw: Vec<f64>,
    old_logp: Vec<f64>,
    advantages: Vec<f64>,
    targets: Vec<f64>,
    /// Transitions that contribute to the policy loss.
    actor_rows: Vec<usize>,
}

impl UpdateBatch {
    fn build(agent: &PpoAgent, batch: &[EpisodeRecord], cfg: &PpoConfig) -> Result<Self> {
        let mut obs = Vec::new();
        let mut raw = Vec::new();
        let mut returns = Vec::new();
        let mut actor_rows = Vec::new();
        for ep in batch {
            for (t, g) in ep.transitions.iter().zip(ep.returns(cfg.gamma)) {
                if !t.forced && t.raw_action.is_finite() {
                    actor_rows.push(obs.len());
                }
                obs.push(t.observation.clone());
                raw.push(if t.raw_action.is_finite() { t.raw_action } else { 0.0 });
                returns.push(g);
            }
        }
        let n = obs.len();
        let x = Tensor::from_rows(&obs)?;
        let old = agent.old_actor.infer(&x)?;
        let old_logp = (0..n)
            .map(|i| gaussian_log_prob(raw[i], old.row(i)[0], old.row(i)[1].clamp(LOG_STD_MIN, LOG_STD_MAX)))
            .collect();
        let values = agent.critic.infer(&x)?;
        let mut advantages: Vec<f64> =
            (0..n).map(|i| returns[i] - (agent.value_offset + agent.value_scale * values.data()[i])).collect();
        if cfg.normalize_advantages && actor_rows.len() > 1 {
            let k = actor_rows.len() as f64;
            let m = actor_rows.iter().map(|&i| advantages[i]).sum::<f64>() / k;
            let v = actor_rows.iter().map(|&i| (advantages[i] - m).powi(2)).sum::<f64>() / k;
            let s = v.sqrt().max(1e-8);
            advantages.iter_mut().for_each(|a| *a = (*a - m) / s);
        }
        let targets = returns.iter().map(|g| (g - agent.value_offset) / agent.value_scale).collect();
        Ok(UpdateBatch { x, raw, old_logp, advantages, targets, actor_rows })
    }
}

/// Loss diagnostics plus actor and critic gradients of the full objective
/// at the current parameters. Leaves forward caches filled.
fn objective(
    agent: &mut PpoAgent,
    b: &UpdateBatch,
    cfg: &PpoConfig,
) -> Result<(PpoDiagnostics, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = b.raw.len();
    let out = agent.actor.forward(&b.x)?;
    let vout = agent.critic.forward(&b.x)?;
    let na = b.actor_rows.len().max(1) as f64;
    let nv = n.max(1) as f64;
    let mut g_actor = vec![0.0; n * 2];
    let (mut surr, mut ent, mut clipped, mut kl) = (0.0, 0.0, 0.0, 0.0);
    for &i in &b.actor_rows {
        let mean = out.row(i)[0];
        let raw_ls = out.row(i)[1];
        let ls = raw_ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
        let u = b.raw[i];
        let logp = gaussian_log_prob(u, mean, ls);
        let r = (logp - b.old_logp[i]).exp();
        let a = b.advantages[i];
        surr += clipped_surrogate(r, a, cfg.clip);
        ent += entropy_term(ls);
        kl += b.old_logp[i] - logp;
        let unclipped = r * a <= r.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
        if !unclipped {
            clipped += 1.0;
        }
        // d ratio / d mean = r (u - m) / s^2, d ratio / d log s = r (z^2 - 1)
        let dl_dr = if unclipped { a } else { 0.0 };
        let sigma2 = (2.0 * ls).exp();
        let z2 = (u - mean).powi(2) / sigma2;
        g_actor[2 * i] = -dl_dr * r * (u - mean) / sigma2 / na;
        if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_ls) {
            g_actor[2 * i + 1] = (-dl_dr * r * (z2 - 1.0) - cfg.entropy_coef) / na;
        }
    }
    let mut value_loss = 0.0;
    let mut g_critic = vec![0.0; n];
    for i in 0..n {
        let d = vout.data()[i] - b.targets[i];
        value_loss += d * d;
        g_critic[i] = cfg.value_coef * 2.0 * d / nv;
    }
    let policy_loss = -surr / na;
    let value_loss = value_loss / nv;
    let entropy = ent / na;
    let diag = PpoDiagnostics {
        policy_loss,
        value_loss,
        entropy,
        total_loss: policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy,
        clip_fraction: clipped / na,
        approx_kl: kl / na,
        epochs_run: 0,
        aborted: false,
    };
    let (_, ga) = agent.actor.backward(&Tensor::matrix(n, 2, g_actor)?)?;
    let (_, gc) = agent.critic.backward(&Tensor::matrix(n, 1, g_critic)?)?;
    Ok((diag, ga, gc))
}

/// Snapshots the old policy, then runs `cfg.epochs` full-batch epochs of the
/// clipped PPO objective. Transitions whose power the environment forced
/// only train the critic.
pub fn ppo_update(agent: &mut PpoAgent, batch: &[EpisodeRecord], cfg: &PpoConfig) -> Result<PpoDiagnostics> {
    if batch.iter().all(|e| e.transitions.is_empty()) {
        return Err(PowerError::Argument("empty PPO batch".into()));
    }
    agent.snapshot();
    let b = UpdateBatch::build(agent, batch, cfg)?;
    let mut diag = PpoDiagnostics::default();
    for epoch in 0..cfg.epochs {
        let (d, mut ga, mut gc) = objective(agent, &b, cfg)?;
        diag = PpoDiagnostics { epochs_run: epoch, ..d };
        if !d.total_loss.is_finite() {
            diag.aborted = true;
            log::warn!("PPO update aborted: loss is {}", d.total_loss);
            break;
        }
        clip_global_norm(&mut ga, cfg.clip_norm);
        clip_global_norm(&mut gc, cfg.clip_norm);
        agent.actor_opt.step(agent.actor.params_mut(), &ga)?;
        agent.critic_opt.step(agent.critic.params_mut(), &gc)?;
        diag.epochs_run = epoch + 1;
    }
    agent.actor.clear_cache();
    agent.critic.clear_cache();
    Ok(diag)
}

/// Deterministic evaluation result over a frozen trace set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub audit: BudgetAudit,
}

impl Evaluation {
    fn from_episodes(episodes: &[EpisodeRecord]) -> Self {
        let rewards: Vec<f64> = episodes.iter().map(|e| e.terminal_reward()).collect();
        let n = rewards.len().max(1) as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut audit = BudgetAudit::default();
        episodes.iter().for_each(|e| audit.record(e));
        Evaluation { rewards, mean, std, audit }
    }
}

/// Plays trace `k` (gains `k*N .. (k+1)*N`) with noise stream
/// `derive_seed(noise_seed, "eval/k")`, using the policy's mean action.
pub fn evaluate_episodes(
    env: &PowerEnv<'_>,
    policy: &dyn PowerPolicy,
    traces: &FadingTrace,
    noise_seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    let n = env.blocks();
    if traces.gains.len() < n {
        return Err(PowerError::Argument("trace set shorter than one episode".into()));
    }
    (0..traces.gains.len() / n)
        .into_par_iter()
        .map(|k| {
            let gains = &traces.gains[k * n..(k + 1) * n];
            env.rollout(policy, gains, derive_seed(noise_seed, &format!("eval/{k}")), None)
        })
        .collect()
}

pub fn evaluate(
    env: &PowerEnv<'_>,
    policy: &dyn PowerPolicy,
    traces: &FadingTrace,
    noise_seed: u64,
) -> Result<Evaluation> {
    Ok(Evaluation::from_episodes(&evaluate_episodes(env, policy, traces, noise_seed)?))
}

/// One row of the training curve per recorded episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub iteration: usize,
    pub reward: f64,
    pub fid_proxy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub validation_reward: Option<f64>,
}

pub fn write_curve_csv(rows: &[CurveRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| PowerError::Io(std::io::Error::other(e)))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: PpoAgent,
    pub curve: Vec<CurveRow>,
    pub audit: BudgetAudit,
    pub best_validation: f64,
    pub discarded_episodes: usize,
}

/// Rollout batches in parallel, then a PPO update. Every `eval_every`
/// iterations the deterministic policy is scored on a fixed validation set
/// and the best agent so far is kept.
pub fn train_agent(env: &PowerEnv<'_>, cfg: &PpoConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut agent = PpoAgent::new(env.observation_len(), env.blocks(), cfg);
    let validation = env.sample_traces(cfg.validation_traces.max(1), derive_seed(cfg.seed, "ppo/validation"))?;
    let val_noise = derive_seed(cfg.seed, "ppo/validation-noise");
    let score = |a: &PpoAgent| -> Result<Evaluation> { evaluate(env, a, &validation, val_noise) };
    let first = score(&agent)?;
    let mut audit = first.audit;
    let mut best = (first.mean, agent.clone());
    let mut curve = Vec::new();
    let mut discarded = 0;
    let model = env.channel_model()?;
    let blocks = env.blocks();
    for it in 0..cfg.iterations {
        let results: Vec<Result<EpisodeRecord>> = (0..cfg.episodes_per_batch)
            .into_par_iter()
            .map(|e| {
                let id = (it * cfg.episodes_per_batch + e) as u64;
                let trace = sample_fading_trace(&model, blocks, derive_seed(cfg.seed, &format!("ppo/trace/{id}")));
                let mut rng = stream_rng(derive_seed(cfg.seed, "ppo/explore"), id);
                env.rollout(&agent, &trace.gains, derive_seed(cfg.seed, &format!("ppo/noise/{id}")), Some(&mut rng))
            })
            .collect();
        let mut batch = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(ep) => batch.push(ep),
                Err(PowerError::Metric(e)) => {
                    log::warn!("episode discarded: {e}");
                    discarded += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if batch.is_empty() {
            continue;
        }
        batch.iter().for_each(|e| audit.record(e));
        if it == 0 {
            let returns: Vec<f64> = batch.iter().map(|e| e.terminal_reward()).collect();
            agent.calibrate_values(&returns);
        }
        let diag = ppo_update(&mut agent, &batch, cfg)?;
        let validation_reward = if (it + 1) % cfg.eval_every.max(1) == 0 || it + 1 == cfg.iterations {
            let ev = score(&agent)?;
            audit.merge(ev.audit);
            if ev.mean > best.0 {
                best = (ev.mean, agent.clone());
            }
            log::info!("iteration {}: validation reward {:.4} (best {:.4})", it + 1, ev.mean, best.0);
            Some(ev.mean)
        } else {
            None
        };
        for (k, ep) in batch.iter().enumerate() {
            curve.push(CurveRow {
                episode: curve.len(),
                iteration: it,
                reward: ep.terminal_reward(),
                fid_proxy: ep.fid,
                policy_loss: diag.policy_loss,
                value_loss: diag.value_loss,
                entropy: diag.entropy,
                validation_reward: if k + 1 == batch.len() { validation_reward } else { None },
            });
        }
    }
    Ok(TrainOutcome { agent: best.1, curve, audit, best_validation: best.0, discarded_episodes: discarded })
}

/// Paired comparison of two policies on the same traces.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SignTest {
    pub n: u64,
    pub wins: u64,
    pub mean_difference: f64,
    /// One-sided `P(X >= wins)` for `X ~ Binomial(n, 1/2)`.
    pub p_value: f64,
}

/// Ties are dropped.
pub fn sign_test(treatment: &[f64], baseline: &[f64]) -> Result<SignTest> {
    if treatment.len() != baseline.len() || treatment.is_empty() {
        return Err(PowerError::Argument("sign test needs two equal, non-empty samples".into()));
    }
    let diffs: Vec<f64> = treatment.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mean_difference = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let n = diffs.iter().filter(|d| **d != 0.0).count() as u64;
    let wins = diffs.iter().filter(|d| **d > 0.0).count() as u64;
    let p_value = if n == 0 {
        1.0
    } else if wins == 0 {
        1.0
    } else {
        let b = Binomial::new(0.5, n).map_err(|e| PowerError::Argument(e.to_string()))?;
        b.sf(wins - 1)
    };
    Ok(SignTest { n, wins, mean_difference, p_value })
}
