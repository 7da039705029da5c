use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use meg::channel::FadingTrace;
use meg::experiment::{
    bundle_dir, env_config, load_bundle, overhead_table, run_power, run_sweep, train_bundle, write_plot_files, write_power_csv,
    ExperimentConfig,
};
use meg::nn::ModelFile;
use meg::power::{evaluate, write_curve_csv, PowerEnv, PowerPolicy, PpoAgent, UniformPolicy};
use meg::rng::derive_seed;

/// Mobile edge generation experiments. Every flag can also be set through
/// the environment variable shown in brackets.
#[derive(Parser, Debug)]
#[command(name = "meg", version)]
struct Cli {
    /// Experiment config (TOML). Without it the preset defaults are used.
    #[arg(long, global = true, env = "MEG_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "MEG_OUT", default_value = "meg-out")]
    out: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long, global = true, env = "MEG_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MEG_JOBS")]
    jobs: Option<usize>,
    /// desk or paper-arithmetic; ignored when --config is given.
    #[arg(long, global = true, env = "MEG_PRESET", default_value = "desk")]
    preset: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train autoencoder, denoiser and codecs (cached by config hash).
    Train,
    /// Quality versus SNR for every mode and rate.
    Sweep,
    /// Train power agents per budget and compare with uniform allocation.
    Power {
        /// Frozen held-out traces to evaluate on (CSV written by a previous run).
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Symbol counts and codec parameter counts.
    Table,
    /// Evaluate uniform allocation or a saved agent on a trace set.
    Eval {
        /// Fading traces (CSV written by `meg power`).
        #[arg(long)]
        traces: PathBuf,
        /// Total transmit power budget per episode.
        #[arg(long)]
        p_max: f64,
        /// Agent checkpoint; uniform allocation when omitted.
        #[arg(long)]
        agent: Option<PathBuf>,
    },
    /// Print the canonical config and its hash.
    Config,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(cli.preset.parse()?),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
    }
    let cfg = resolve_config(&cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Config => {
            print!("{}", cfg.canonical());
            println!("# config hash {}", cfg.hash());
        }
        Command::Table => {
            print!("{}", overhead_table(&cfg)?.render());
        }
        Command::Train => {
            let (_, report) = train_bundle(&cfg, &bundle_dir(out))?;
            for s in &report.stages {
                let status = if s.cache_hit { "cached" } else { "trained" };
                let loss = s.final_loss.map_or(String::new(), |l| format!("  loss {l:.5}"));
                println!("{:<28} {:<8} {:>7.1}s{}", s.stage, status, s.seconds, loss);
            }
            println!("bundle {} (training config {})", bundle_dir(out).display(), cfg.bundle_hash());
        }
        Command::Sweep => {
            let deploy = load_bundle(&cfg, &bundle_dir(out))?;
            let result = run_sweep(&deploy, &cfg)?;
            let mut buf = Vec::new();
            result.write_csv(&mut buf)?;
            write_file(&out.join("sweep.csv"), buf)?;
            let figures = write_plot_files(&result, &out.join("plots"))?;
            println!("{} rows -> {}; {} figures -> {}", result.rows.len(), out.join("sweep.csv").display(), figures.len(), out.join("plots").display());
        }
        Command::Power { traces } => {
            let deploy = load_bundle(&cfg, &bundle_dir(out))?;
            let frozen = traces.as_deref().map(FadingTrace::load).transpose()?;
            let run = run_power(&deploy, &cfg, frozen)?;
            let dir = out.join("power");
            fs::create_dir_all(&dir)?;
            run.traces.save(&dir.join("eval_traces.csv"))?;
            for b in &run.budgets {
                let mut buf = Vec::new();
                write_curve_csv(&b.curve, &mut buf)?;
                write_file(&dir.join(format!("curve_pmax{}.csv", b.p_max)), buf)?;
                b.agent.to_model().with_meta("p_max", b.p_max).save(&dir.join(format!("agent_pmax{}.megn", b.p_max)))?;
            }
            let mut buf = Vec::new();
            write_power_csv(&run.rows, &mut buf)?;
            write_file(&out.join("power.csv"), &buf)?;
            write_file(&dir.join("budget_audit.json"), serde_json::to_string_pretty(&run.audit)?)?;
            print!("{}", String::from_utf8(buf)?);
            println!(
                "budget audit: {} episodes, {} steps, {} violations",
                run.audit.episodes, run.audit.steps, run.audit.violations
            );
            if run.audit.violations > 0 {
                bail!("power budget exceeded {} times", run.audit.violations);
            }
        }
        Command::Eval { traces, p_max, agent } => {
            let deploy = load_bundle(&cfg, &bundle_dir(out))?;
            let traces = FadingTrace::load(traces)?;
            let env = PowerEnv::new(&deploy, env_config(&cfg, *p_max))?;
            let loaded;
            let policy: &dyn PowerPolicy = match agent {
                Some(path) => {
                    loaded = PpoAgent::from_model(ModelFile::load(path)?, &cfg.power.ppo)?;
                    &loaded
                }
                None => &UniformPolicy,
            };
            let ev = evaluate(&env, policy, &traces, derive_seed(cfg.seed, "power/eval-noise"))?;
            println!(
                "n {}  mean fid_proxy {:.6}  std {:.6}  budget violations {}",
                ev.rewards.len(),
                -ev.mean,
                ev.std,
                ev.audit.violations
            );
        }
    }
    Ok(())
}
