//! Experiment runner behind the `meg` binary: config, cached training,
//! sweeps, power-control runs and overhead tables.

mod config;
mod pipeline;
mod plot;
mod power_run;
mod sweep;
mod table;

pub use config::{
    sha256_hex, short_hash, CodecSection, DataConfig, ExperimentConfig, PowerConfig, Preset, SweepConfig,
};
pub use pipeline::{
    bundle_dir, codec_file, load_bundle, train_bundle, Manifest, ManifestEntry, StageReport, TrainReport,
    MANIFEST_FILE, MANIFEST_SCHEMA,
};
pub use plot::{line_chart_svg, PlotPoint};
pub use power_run::{
    env_config, run_power, sample_eval_traces, write_power_csv, BudgetOutcome, PowerRow, PowerRun, POWER_SCHEMA,
};
pub use sweep::{medians, run_sweep, write_plot_files, SweepResult, SweepRow, SWEEP_SCHEMA};
pub use table::{overhead_table, ParamLine, SymbolLine, TableReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    MissingBundle(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Gen(#[from] crate::genmodel::GenError),
    #[error(transparent)]
    Codec(#[from] crate::seedcodec::CodecError),
    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),
    #[error(transparent)]
    Power(#[from] crate::power::PowerError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error(transparent)]
    Channel(#[from] crate::channel::ChannelError),
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}
