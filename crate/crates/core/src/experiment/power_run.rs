//! Trains a power-allocation agent per budget and compares it with uniform
//! allocation on one frozen trace set.

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::ExperimentError;
use crate::channel::FadingTrace;
use crate::genmodel::PromptGrammar;
use crate::power::{
    evaluate, sign_test, train_agent, BudgetAudit, CurveRow, PowerEnv, PowerEnvConfig, PpoAgent, PpoConfig,
    SignTest, UniformPolicy,
};
use crate::protocol::Deployment;
use crate::rng::derive_seed;

pub const POWER_SCHEMA: &str = "meg-power/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub p_max: f64,
    pub uniform_fid: f64,
    pub drl_fid: f64,
    pub uniform_std: f64,
    pub drl_std: f64,
    pub n: usize,
    /// Mean paired reward difference (agent minus uniform).
    pub mean_gain: f64,
    pub sign_wins: u64,
    pub sign_p: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct BudgetOutcome {
    pub p_max: f64,
    pub agent: PpoAgent,
    pub curve: Vec<CurveRow>,
    pub agent_rewards: Vec<f64>,
    pub uniform_rewards: Vec<f64>,
    pub sign: SignTest,
}

#[derive(Debug, Clone)]
pub struct PowerRun {
    pub rows: Vec<PowerRow>,
    pub budgets: Vec<BudgetOutcome>,
    /// Every training, validation and evaluation episode.
    pub audit: BudgetAudit,
    pub traces: FadingTrace,
}

/// Environment for one budget, built from the `[power]` section.
pub fn env_config(cfg: &ExperimentConfig, p_max: f64) -> PowerEnvConfig {
    let p = &cfg.power;
    PowerEnvConfig {
        f_c: p.f_c,
        block_length: p.block_length,
        snr_db: p.snr_db,
        channel: p.channel,
        p_max,
        prompts: PromptGrammar.evaluation(p.prompts),
        noise_seed: derive_seed(cfg.seed, "power/prompts"),
        spend_remainder_on_last_block: p.spend_remainder_on_last_block,
    }
}

/// The held-out set: `eval_traces` episodes' worth of gains.
pub fn sample_eval_traces(deploy: &Deployment, cfg: &ExperimentConfig) -> Result<FadingTrace, ExperimentError> {
    let env = PowerEnv::new(deploy, env_config(cfg, cfg.power.budgets[0]))?;
    Ok(env.sample_traces(cfg.power.eval_traces, derive_seed(cfg.seed, "power/eval-traces"))?)
}

/// `traces` overrides the generated held-out set (e.g. one imported from CSV).
pub fn run_power(
    deploy: &Deployment,
    cfg: &ExperimentConfig,
    traces: Option<FadingTrace>,
) -> Result<PowerRun, ExperimentError> {
    cfg.validate()?;
    let traces = match traces {
        Some(t) => t,
        None => sample_eval_traces(deploy, cfg)?,
    };
    let hash = cfg.hash();
    let eval_noise = derive_seed(cfg.seed, "power/eval-noise");
    let mut rows = Vec::new();
    let mut budgets = Vec::new();
    let mut audit = BudgetAudit::default();
    for (k, &p_max) in cfg.power.budgets.iter().enumerate() {
        let env = PowerEnv::new(deploy, env_config(cfg, p_max))?;
        if traces.gains.len() < env.blocks() {
            return Err(ExperimentError::Config(format!(
                "trace set has {} gains, one episode needs {}",
                traces.gains.len(),
                env.blocks()
            )));
        }
        let ppo = PpoConfig { seed: derive_seed(cfg.seed, &format!("power/ppo/{k}")), ..cfg.power.ppo.clone() };
        log::info!("training power agent for p_max = {p_max}");
        let trained = train_agent(&env, &ppo)?;
        audit.merge(trained.audit);
        let drl = evaluate(&env, &trained.agent, &traces, eval_noise)?;
        let uniform = evaluate(&env, &UniformPolicy, &traces, eval_noise)?;
        audit.merge(drl.audit);
        audit.merge(uniform.audit);
        let sign = sign_test(&drl.rewards, &uniform.rewards)?;
        rows.push(PowerRow {
            p_max,
            uniform_fid: -uniform.mean,
            drl_fid: -drl.mean,
            uniform_std: uniform.std,
            drl_std: drl.std,
            n: drl.rewards.len(),
            mean_gain: sign.mean_difference,
            sign_wins: sign.wins,
            sign_p: sign.p_value,
            config_hash: hash.clone(),
        });
        budgets.push(BudgetOutcome {
            p_max,
            agent: trained.agent,
            curve: trained.curve,
            agent_rewards: drl.rewards,
            uniform_rewards: uniform.rewards,
            sign,
        });
    }
    Ok(PowerRun { rows, budgets, audit, traces })
}

pub fn write_power_csv(rows: &[PowerRow], w: impl std::io::Write) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
