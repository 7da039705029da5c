//! Real-valued point-to-point link: AWGN or Rayleigh block fading, per-block
//! transmit power, and zero-forcing equalization with perfect receiver CSI.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Zero effective gain; the block cannot be recovered.
    #[error("block erased: effective gain h*sqrt(p) is zero")]
    Erasure,
    #[error("trace file: {0}")]
    Trace(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    RayleighBlock,
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::RayleighBlock => "rayleigh_block",
        })
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh_block" | "rayleigh" => Ok(ChannelKind::RayleighBlock),
            other => Err(ChannelError::Argument(format!("unknown channel kind {other:?}"))),
        }
    }
}

/// Noise standard deviation for a given SNR relative to `signal_power`.
///
/// `snr_db = +inf` gives a noiseless link.
pub fn snr_to_noise_std(snr_db: f64, signal_power: f64) -> f64 {
    (signal_power / 10f64.powf(snr_db / 10.0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub kind: ChannelKind,
    /// Symbols per coherence block.
    pub block_length: usize,
    pub noise_std: f64,
}

impl ChannelModel {
    pub fn new(kind: ChannelKind, block_length: usize, noise_std: f64) -> Result<Self, ChannelError> {
        if block_length == 0 {
            return Err(ChannelError::Argument("block length must be at least 1".into()));
        }
        if !(noise_std >= 0.0) {
            return Err(ChannelError::Argument(format!("noise std {noise_std} is negative")));
        }
        Ok(ChannelModel { kind, block_length, noise_std })
    }

    /// Unit signal power at the given SNR.
    pub fn at_snr(kind: ChannelKind, block_length: usize, snr_db: f64) -> Result<Self, ChannelError> {
        Self::new(kind, block_length, snr_to_noise_std(snr_db, 1.0))
    }

    pub fn blocks_for(&self, symbols: usize) -> usize {
        symbols.div_ceil(self.block_length).max(1)
    }
}

/// Per-block channel magnitudes for one transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingTrace {
    pub gains: Vec<f64>,
    pub block_length: usize,
    pub seed: u64,
}

impl FadingTrace {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), ChannelError> {
        let mut w = w;
        writeln!(w, "# meg-trace v1 block_length={} seed={}", self.block_length, self.seed)?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["block", "gain"])?;
        for (i, g) in self.gains.iter().enumerate() {
            csv.write_record([i.to_string(), format!("{g:?}")])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self, ChannelError> {
        let mut text = String::new();
        let mut r = r;
        r.read_to_string(&mut text)?;
        let header = text
            .lines()
            .next()
            .filter(|l| l.starts_with("# meg-trace v1"))
            .ok_or_else(|| ChannelError::Trace("missing '# meg-trace v1' header".into()))?;
        let mut block_length = None;
        let mut seed = None;
        for field in header.split_whitespace() {
            if let Some(v) = field.strip_prefix("block_length=") {
                block_length = v.parse().ok();
            } else if let Some(v) = field.strip_prefix("seed=") {
                seed = v.parse().ok();
            }
        }
        let block_length: usize = block_length
            .filter(|&b| b >= 1)
            .ok_or_else(|| ChannelError::Trace("bad block_length".into()))?;
        let seed = seed.ok_or_else(|| ChannelError::Trace("bad seed".into()))?;
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let mut gains = Vec::new();
        for (expected, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let idx: usize = rec
                .get(0)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| ChannelError::Trace(format!("row {expected}: bad block index")))?;
            if idx != expected {
                return Err(ChannelError::Trace(format!("row {expected}: block index {idx}")));
            }
            let g: f64 = rec
                .get(1)
                .and_then(|v| v.trim().parse().ok())
                .filter(|g: &f64| *g > 0.0 && g.is_finite())
                .ok_or_else(|| ChannelError::Trace(format!("row {expected}: bad gain")))?;
            gains.push(g);
        }
        if gains.is_empty() {
            return Err(ChannelError::Trace("no blocks".into()));
        }
        Ok(FadingTrace { gains, block_length, seed })
    }

    pub fn save(&self, path: &Path) -> Result<(), ChannelError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ChannelError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Draws a trace of `num_blocks` gains from a generator seeded with `seed`.
///
/// Rayleigh magnitudes are `sqrt((a^2 + b^2) / 2)` with standard normal
/// `a`, `b`, so `E[h^2] = 1`.
pub fn sample_fading_trace(model: &ChannelModel, num_blocks: usize, seed: u64) -> FadingTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gains = match model.kind {
        ChannelKind::Awgn => vec![1.0; num_blocks.max(1)],
        ChannelKind::RayleighBlock => (0..num_blocks.max(1))
            .map(|_| loop {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let h = ((a * a + b * b) / 2.0).sqrt();
                if h > 0.0 {
                    break h;
                }
            })
            .collect(),
    };
    FadingTrace { gains, block_length: model.block_length, seed }
}

/// `y = h * sqrt(p) * x + n`, `n ~ N(0, noise_std^2)` per symbol.
pub fn transmit(
    symbols: &[f32],
    gain: f64,
    power: f64,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, ChannelError> {
    if !(power >= 0.0) {
        return Err(ChannelError::Argument(format!("negative transmit power {power}")));
    }
    let amplitude = gain * power.sqrt();
    Ok(symbols
        .iter()
        .map(|&x| {
            let n: f64 = if noise_std > 0.0 {
                noise_std * Distribution::<f64>::sample(&StandardNormal, rng)
            } else {
                0.0
            };
            amplitude * x as f64 + n
        })
        .collect())
}

/// Zero-forcing: `x_hat = y / (h * sqrt(p))`.
pub fn equalize(received: &[f64], gain: f64, power: f64) -> Result<Vec<f32>, ChannelError> {
    let amplitude = gain * power.max(0.0).sqrt();
    if !(amplitude > 0.0) {
        return Err(ChannelError::Erasure);
    }
    Ok(received.iter().map(|&y| (y / amplitude) as f32).collect())
}

/// Symbols recovered at the receiver after per-block equalization.
#[derive(Debug, Clone)]
pub struct Reception {
    pub symbols: Vec<f32>,
    /// One flag per block; erased blocks are delivered as zeros.
    pub erased: Vec<bool>,
}

impl Reception {
    pub fn any_erased(&self) -> bool {
        self.erased.iter().any(|&e| e)
    }
}

/// Sends `symbols` block by block over `gains[first_block..]` with the given
/// per-block powers, then equalizes each block.
pub fn pass_blocks(
    symbols: &[f32],
    block_length: usize,
    gains: &[f64],
    powers: &[f64],
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<Reception, ChannelError> {
    let blocks = symbols.len().div_ceil(block_length.max(1));
    if gains.len() < blocks || powers.len() < blocks {
        return Err(ChannelError::Argument(format!(
            "{blocks} blocks need gains/powers, have {}/{}",
            gains.len(),
            powers.len()
        )));
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut erased = Vec::with_capacity(blocks);
    for (b, chunk) in symbols.chunks(block_length.max(1)).enumerate() {
        let y = transmit(chunk, gains[b], powers[b], noise_std, rng)?;
        match equalize(&y, gains[b], powers[b]) {
            Ok(x) => {
                out.extend(x);
                erased.push(false);
            }
            Err(ChannelError::Erasure) => {
                out.extend(std::iter::repeat_n(0.0, chunk.len()));
                erased.push(true);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Reception { symbols: out, erased })
}
