//! Image quality and transmission cost.
//!
//! The Fréchet score uses a frozen random tanh network instead of a
//! pretrained vision model, so every output calls it `fid_proxy`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genmodel::{Dims, PixelImage};
use crate::nn::{Activation, Mlp, Tensor};
use crate::rng::stream_rng;
use crate::seedcodec::seed_length;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0} vs {1} values")]
    Dimension(usize, usize),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("eigendecomposition did not converge")]
    Numeric,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

pub fn mse<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::Dimension(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x.into() - y.into()).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(i_max^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr<T: Copy + Into<f64>>(a: &[T], b: &[T], i_max: f64) -> Result<f64, MetricError> {
    if !(i_max > 0.0) {
        return Err(MetricError::Argument(format!("i_max must be positive, got {i_max}")));
    }
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (i_max * i_max / m).log10() })
}

/// PSNR on the 8-bit views of two images.
pub fn image_psnr(generated: &PixelImage, truth: &PixelImage) -> Result<f64, MetricError> {
    psnr(&generated.quantized(), &truth.quantized(), 255.0)
}

/// MSE on the `[0, 1]` float values of two images.
pub fn image_mse(generated: &PixelImage, truth: &PixelImage) -> Result<f64, MetricError> {
    mse(&generated.values, &truth.values)
}

pub const EXTRACTOR_SEED: u64 = 0xFEED;

/// Frozen tanh network mapping an image to `feature_dim` features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    net: Mlp,
    input: usize,
}

impl FeatureExtractor {
    pub fn new(image: Dims, hidden: usize, feature_dim: usize) -> Self {
        let mut rng = stream_rng(EXTRACTOR_SEED, 0);
        let net = Mlp::dense_stack(
            "features",
            &[image.len(), hidden, feature_dim],
            Activation::Tanh,
            Activation::Tanh,
            &mut rng,
        );
        FeatureExtractor { net, input: image.len() }
    }

    /// `image -> 128 -> 64`.
    pub fn standard(image: Dims) -> Self {
        Self::new(image, 128, 64)
    }

    /// Features of the 8-bit view, rescaled to `[0, 1]`.
    pub fn features(&self, images: &[PixelImage]) -> Result<Vec<Vec<f64>>, MetricError> {
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            if img.values.len() != self.input {
                return Err(MetricError::Dimension(img.values.len(), self.input));
            }
            rows.push(img.quantized().iter().map(|&q| q as f32 / 255.0).collect::<Vec<f32>>());
        }
        let out = self.net.infer(&Tensor::from_rows(&rows)?)?;
        Ok((0..images.len()).map(|r| out.row(r).iter().map(|&v| v as f64).collect()).collect())
    }
}

fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), MetricError> {
    let n = features.len();
    if n < 2 {
        return Err(MetricError::Argument(format!("need at least 2 samples, got {n}")));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(MetricError::Dimension(bad.len(), d));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    Ok((mean, cov))
}

const EIGEN_FLOOR: f64 = 1e-10;

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricError> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, f64::EPSILON, 10_000).ok_or(MetricError::Numeric)
}

fn floor(v: f64) -> f64 {
    if v < EIGEN_FLOOR { 0.0 } else { v }
}

/// Fréchet distance between the Gaussians fitted to two feature sets:
/// `|mu_g - mu_0|^2 + Tr(C_g + C_0 - 2 (C_0^1/2 C_g C_0^1/2)^1/2)`.
pub fn fid_from_features(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64, MetricError> {
    let (mu_g, c_g) = moments(generated)?;
    let (mu_0, c_0) = moments(reference)?;
    if mu_g.len() != mu_0.len() {
        return Err(MetricError::Dimension(mu_g.len(), mu_0.len()));
    }
    let e0 = eigen(c_0.clone())?;
    let root = DVector::from_iterator(e0.eigenvalues.len(), e0.eigenvalues.iter().map(|&l| floor(l).sqrt()));
    let sqrt_c0 = &e0.eigenvectors * DMatrix::from_diagonal(&root) * e0.eigenvectors.transpose();
    let inner = &sqrt_c0 * &c_g * &sqrt_c0;
    let cross: f64 = eigen(inner)?.eigenvalues.iter().map(|&l| floor(l).sqrt()).sum();
    let mean_term = (&mu_g - &mu_0).norm_squared();
    Ok((mean_term + c_g.trace() + c_0.trace() - 2.0 * cross).max(0.0))
}

pub fn fid(
    generated: &[PixelImage],
    reference: &[PixelImage],
    extractor: &FeatureExtractor,
) -> Result<f64, MetricError> {
    fid_from_features(&extractor.features(generated)?, &extractor.features(reference)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Pixels are sent.
    Centralized,
    /// The uncompressed latent is sent.
    RawFeature,
    /// The compressed seed is sent.
    Meg,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Centralized, Mode::RawFeature, Mode::Meg];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Centralized => "centralized",
            Mode::RawFeature => "raw_feature",
            Mode::Meg => "meg",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Channel uses needed to deliver one image in `mode`.
pub fn symbol_count(
    mode: Mode,
    image: Dims,
    latent_channels: usize,
    downsample: usize,
    f_c: f64,
) -> Result<usize, MetricError> {
    let raw = latent_channels * (image.height / downsample) * (image.width / downsample);
    Ok(match mode {
        Mode::Centralized => image.len(),
        Mode::RawFeature => raw,
        Mode::Meg => seed_length(raw, f_c).map_err(|e| MetricError::Argument(e.to_string()))?,
    })
}

pub const REPORT_SCHEMA: &str = "meg-metrics/1";

/// One CSV row per generated image or batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub psnr_db: f64,
    pub fid_proxy: f64,
    pub mse: f64,
    pub symbols: usize,
    pub config_hash: String,
}

impl MetricReport {
    pub fn write_csv<W: std::io::Write>(rows: &[MetricReport], w: W) -> Result<(), MetricError> {
        let mut csv = csv::Writer::from_writer(w);
        for r in rows {
            csv.serialize(r)?;
        }
        csv.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricReport>, MetricError> {
        let mut rdr = csv::Reader::from_reader(r);
        Ok(rdr.deserialize().collect::<Result<_, _>>()?)
    }
}
