//! Quality-versus-SNR sweep over delivery modes and compression rates.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::plot::{line_chart_svg, PlotPoint};
use super::ExperimentError;
use crate::genmodel::PromptGrammar;
use crate::metrics::Mode;
use crate::protocol::{run_end_to_end, Deployment, E2eConfig};
use crate::rng::derive_seed;

pub const SWEEP_SCHEMA: &str = "meg-sweep/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub f_c: f64,
    pub snr_db: f64,
    pub trial: usize,
    pub psnr_db: f64,
    pub fid_proxy: f64,
    pub mse: f64,
    pub symbols: usize,
    /// Seed of the cell's fading trace and channel noise.
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<(), ExperimentError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl std::io::Read) -> Result<Self, ExperimentError> {
        let rows = csv::Reader::from_reader(r).deserialize().collect::<Result<Vec<SweepRow>, _>>()?;
        Ok(SweepResult { rows })
    }

    pub fn select(&self, mode: Mode, f_c: f64, snr_db: f64) -> Vec<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.mode == mode && (r.f_c - f_c).abs() < 1e-9 && (r.snr_db - snr_db).abs() < 1e-9)
            .collect()
    }
}

/// Median of the finite values; NaN when there are none.
pub fn medians(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs every `(f_c, snr, trial)` cell. All modes in a cell share the
/// fading trace and channel noise; trial `k` generates the same latents at
/// every SNR and rate so curves are paired along their axis.
pub fn run_sweep(deploy: &Deployment, cfg: &ExperimentConfig) -> Result<SweepResult, ExperimentError> {
    cfg.validate()?;
    let sw = &cfg.sweep;
    let hash = cfg.hash();
    let prompts = PromptGrammar.evaluation(sw.prompts);
    let mut cells = Vec::new();
    for &f_c in &sw.rates {
        for &snr in &sw.snrs_db {
            for trial in 0..sw.trials {
                cells.push((f_c, snr, trial));
            }
        }
    }
    let per_cell: Vec<Vec<SweepRow>> = cells
        .par_iter()
        .enumerate()
        .map(|(index, &(f_c, snr, trial))| {
            let seed = derive_seed(cfg.seed, &format!("sweep/cell/{index}"));
            let e2e = E2eConfig {
                channel: sw.channel,
                block_length: sw.block_length,
                trace_seed: derive_seed(seed, "trace"),
                noise_seed: derive_seed(cfg.seed, &format!("sweep/trial/{trial}")),
                channel_seed: derive_seed(seed, "noise"),
                modes: sw.modes.clone(),
                config_hash: hash.clone(),
                ..E2eConfig::new(prompts.clone(), f_c, snr)
            };
            let run = run_end_to_end(deploy, &e2e)?;
            Ok(run
                .results
                .iter()
                .map(|r| SweepRow {
                    mode: r.mode,
                    f_c,
                    snr_db: snr,
                    trial,
                    psnr_db: r.report.psnr_db,
                    fid_proxy: r.report.fid_proxy,
                    mse: r.report.mse,
                    symbols: r.symbols_per_image,
                    seed,
                    config_hash: hash.clone(),
                })
                .collect())
        })
        .collect::<Result<_, ExperimentError>>()?;
    Ok(SweepResult { rows: per_cell.into_iter().flatten().collect() })
}

/// Per-figure data files (`x,y,series` of trial medians) plus SVG charts:
/// PSNR and FID-proxy against SNR for each rate, and against rate for
/// each SNR.
pub fn write_plot_files(result: &SweepResult, dir: &Path) -> Result<Vec<String>, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    type Key = (String, String); // (figure, series)
    let mut groups: BTreeMap<Key, BTreeMap<i64, (f64, Vec<f64>)>> = BTreeMap::new();
    let milli = |v: f64| (v * 1000.0).round() as i64;
    for r in &result.rows {
        for (metric, y) in [("psnr", r.psnr_db), ("fid", r.fid_proxy)] {
            let by_snr = (format!("{metric}_vs_snr_fc{}", r.f_c), r.mode.to_string());
            groups.entry(by_snr).or_default().entry(milli(r.snr_db)).or_insert((r.snr_db, vec![])).1.push(y);
            let by_rate = (format!("{metric}_vs_fc_snr{}", r.snr_db), r.mode.to_string());
            groups.entry(by_rate).or_default().entry(milli(r.f_c)).or_insert((r.f_c, vec![])).1.push(y);
        }
    }
    let mut figures: BTreeMap<String, Vec<PlotPoint>> = BTreeMap::new();
    for ((figure, series), xs) in groups {
        let pts = figures.entry(figure).or_default();
        for (_, (x, ys)) in xs {
            pts.push(PlotPoint { x, y: medians(ys), series: series.clone() });
        }
    }
    let mut written = Vec::new();
    for (figure, pts) in &figures {
        let csv_path = dir.join(format!("{figure}.csv"));
        let mut w = csv::Writer::from_path(&csv_path)?;
        for p in pts {
            w.serialize(p)?;
        }
        w.flush()?;
        let (x_label, y_label) = match (figure.contains("_vs_snr"), figure.starts_with("psnr")) {
            (true, true) => ("SNR (dB)", "PSNR (dB)"),
            (true, false) => ("SNR (dB)", "FID-proxy"),
            (false, true) => ("compression rate f_c", "PSNR (dB)"),
            (false, false) => ("compression rate f_c", "FID-proxy"),
        };
        std::fs::write(dir.join(format!("{figure}.svg")), line_chart_svg(figure, x_label, y_label, pts))?;
        written.push(figure.clone());
    }
    Ok(written)
}
