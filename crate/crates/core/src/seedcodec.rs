//! Learned compression of latent features into unit-power seeds.
//!
//! Encoder: one dense layer `|z| -> L`. Decoder: a dense projection `h1`
//! followed by a normalize/dense/relu body and a layer norm, with `h1` added
//! back as a residual. Seeds are scaled to unit mean-square; the scale rides
//! in the frame header and is re-applied before the decoder.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::channel::{snr_to_noise_std, ChannelKind, ChannelModel};
use crate::genmodel::{Dims, LatentFeature, TrainLog};
use crate::nn::{clip_global_norm, Activation, Adam, LayerSpec, Mlp, ModelFile, NnError, ParamMut, Real, Tensor};
use crate::rng::{normal_vec, stream_rng};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{what}: expected {expected} values, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("frame error: expected {expected} symbols, got {got}")]
    Frame { expected: usize, got: usize },
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `round(f_c * latent_size)`, which must land strictly inside `(0, latent_size)`.
pub fn seed_length(latent_size: usize, f_c: f64) -> Result<usize, CodecError> {
    if !(f_c > 0.0 && f_c < 1.0) {
        return Err(CodecError::Argument(format!("compression rate {f_c} outside (0, 1)")));
    }
    let l = (f_c * latent_size as f64).round() as usize;
    if l == 0 || l >= latent_size {
        return Err(CodecError::Argument(format!(
            "compression rate {f_c} gives {l} symbols for a latent of {latent_size}"
        )));
    }
    Ok(l)
}

/// Layer descriptors of the codec for the given sizes.
pub fn codec_architecture(latent: u64, seed: u64, bottleneck: u64) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
    let dense = |i, o, activation| LayerSpec::Dense { in_features: i, out_features: o, activation };
    let encoder = vec![LayerSpec::Flatten, dense(latent, seed, Activation::None)];
    let decoder = vec![
        dense(seed, latent, Activation::Relu),
        LayerSpec::Normalize { size: latent },
        dense(latent, bottleneck, Activation::Relu),
        LayerSpec::Normalize { size: bottleneck },
        dense(bottleneck, latent, Activation::Relu),
        LayerSpec::LayerNorm { size: latent },
        LayerSpec::Residual,
        LayerSpec::Unflatten,
    ];
    (encoder, decoder)
}

/// Unit-power symbols plus what the receiver needs to undo the scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Seed {
    pub symbols: Vec<f32>,
    pub latent: Dims,
    pub f_c: f64,
    /// Root-mean-square of the encoder output.
    pub scale: f32,
}

const SCALE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CodecPair<T: Real = f32> {
    pub encoder: Mlp<T>,
    /// First decoder projection, whose output is also the residual branch.
    pub projection: Mlp<T>,
    pub body: Mlp<T>,
    pub latent: Dims,
    pub f_c: f64,
    pub trained_snr_db: f64,
}

/// Cached quantities of one training forward pass.
struct Pass<T: Real> {
    enc: Tensor<T>,
    scales: Vec<T>,
    out: Tensor<T>,
}

impl<T: Real> CodecPair<T> {
    pub fn new(latent: Dims, f_c: f64, bottleneck: usize, rng: &mut impl Rng) -> Result<Self, CodecError> {
        let n = latent.len();
        let l = seed_length(n, f_c)?;
        Ok(CodecPair {
            encoder: Mlp::new("codec_encoder").dense(n, l, Activation::None, rng),
            projection: Mlp::new("codec_projection").dense(l, n, Activation::Relu, rng),
            body: Mlp::new("codec_body")
                .normalize(n, 1e-6)
                .dense(n, bottleneck, Activation::Relu, rng)
                .normalize(bottleneck, 1e-6)
                .dense(bottleneck, n, Activation::Relu, rng)
                .layer_norm(n, 1e-6),
            latent,
            f_c,
            trained_snr_db: f64::NAN,
        })
    }

    pub fn seed_len(&self) -> usize {
        self.encoder.output_size().unwrap_or(0)
    }

    pub fn bottleneck(&self) -> usize {
        self.body.specs().iter().find_map(|s| match s {
            LayerSpec::Dense { out_features, .. } => Some(*out_features as usize),
            _ => None,
        }).unwrap_or(0)
    }

    pub fn specs(&self) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
        codec_architecture(self.latent.len() as u64, self.seed_len() as u64, self.bottleneck() as u64)
    }

    pub fn cast<U: Real>(&self) -> CodecPair<U> {
        CodecPair {
            encoder: self.encoder.cast(),
            projection: self.projection.cast(),
            body: self.body.cast(),
            latent: self.latent,
            f_c: self.f_c,
            trained_snr_db: self.trained_snr_db,
        }
    }

    fn decode_rows(&self, d: &Tensor<T>) -> Result<Tensor<T>, CodecError> {
        let h1 = self.projection.infer(d)?;
        let mut out = self.body.infer(&h1)?;
        for (o, h) in out.data_mut().iter_mut().zip(h1.data()) {
            *o += *h;
        }
        Ok(out)
    }

    /// Training forward with a fixed effective symbol noise (rows of
    /// `noise` are added to the unit-power seeds). Returns the mean squared
    /// reconstruction error.
    fn forward_train(&mut self, z: &Tensor<T>, noise: &Tensor<T>) -> Result<(T, Pass<T>), CodecError> {
        let enc = self.encoder.forward(z)?;
        let l = enc.trailing();
        let mut scales = Vec::with_capacity(enc.rows());
        let mut d = enc.clone();
        for r in 0..enc.rows() {
            let e = enc.row(r);
            let s = rms(e);
            scales.push(s);
            for (j, v) in d.data_mut()[r * l..(r + 1) * l].iter_mut().enumerate() {
                // x = e / s goes through the channel; the receiver multiplies by s
                *v = e[j] + s * noise.data()[r * l + j];
            }
        }
        let h1 = self.projection.forward(&d)?;
        let mut out = self.body.forward(&h1)?;
        for (o, h) in out.data_mut().iter_mut().zip(h1.data()) {
            *o += *h;
        }
        let n = T::of(out.len() as f64);
        let loss = out.data().iter().zip(z.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        Ok((loss, Pass { enc, scales, out }))
    }

    /// Gradients in the order of [`CodecPair::params_mut`].
    fn backward_train(&self, z: &Tensor<T>, noise: &Tensor<T>, pass: &Pass<T>) -> Result<Vec<Vec<T>>, CodecError> {
        let n = T::of(pass.out.len() as f64);
        let two = T::of(2.0);
        let g_out: Vec<T> = pass.out.data().iter().zip(z.data()).map(|(&a, &b)| two * (a - b) / n).collect();
        let g_out = Tensor::new(pass.out.shape().to_vec(), g_out)?;
        let (g_h1_body, body_grads) = self.body.backward(&g_out)?;
        let mut g_h1 = g_out;
        for (g, b) in g_h1.data_mut().iter_mut().zip(g_h1_body.data()) {
            *g += *b;
        }
        let (g_d, proj_grads) = self.projection.backward(&g_h1)?;
        // d = e + s(e) * noise with s = rms(e): dd/de adds (g_d . noise) e / (L s)
        let l = pass.enc.trailing();
        let lf = T::of(l as f64);
        let mut g_e = g_d.clone();
        for r in 0..pass.enc.rows() {
            let s = pass.scales[r];
            let span = r * l..(r + 1) * l;
            let dot: T = g_d.data()[span.clone()].iter().zip(&noise.data()[span.clone()]).map(|(&a, &b)| a * b).sum();
            let e = &pass.enc.data()[span.clone()];
            for (g, &ev) in g_e.data_mut()[span].iter_mut().zip(e) {
                *g += dot * ev / (lf * s);
            }
        }
        let (_, enc_grads) = self.encoder.backward(&g_e)?;
        Ok(enc_grads.into_iter().chain(proj_grads).chain(body_grads).collect())
    }

    /// Loss and gradients of the whole encoder, channel, decoder chain for a
    /// fixed noise realization.
    pub fn loss_and_grads(&mut self, z: &Tensor<T>, noise: &Tensor<T>) -> Result<(T, Vec<Vec<T>>), CodecError> {
        if z.trailing() != self.latent.len() {
            return Err(CodecError::Dimension { what: "latent", expected: self.latent.len(), got: z.trailing() });
        }
        if noise.len() != z.rows() * self.seed_len() {
            return Err(CodecError::Dimension {
                what: "noise",
                expected: z.rows() * self.seed_len(),
                got: noise.len(),
            });
        }
        let (loss, pass) = self.forward_train(z, noise)?;
        let grads = self.backward_train(z, noise, &pass)?;
        Ok((loss, grads))
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.projection.params_mut());
        out.extend(self.body.params_mut());
        out
    }

    pub fn clear_cache(&mut self) {
        self.encoder.clear_cache();
        self.projection.clear_cache();
        self.body.clear_cache();
    }
}

fn rms<T: Real>(e: &[T]) -> T {
    let ms = e.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>() / e.len().max(1) as f64;
    T::of(ms.sqrt().max(SCALE_FLOOR))
}

impl CodecPair<f32> {
    /// Flatten, encode and scale to unit mean-square.
    pub fn compress(&self, z: &LatentFeature) -> Result<Seed, CodecError> {
        if z.dims != self.latent || z.values.len() != self.latent.len() {
            return Err(CodecError::Dimension { what: "latent", expected: self.latent.len(), got: z.values.len() });
        }
        let e = self.encoder.infer(&Tensor::vector(z.values.clone()))?.into_data();
        let s = rms(&e);
        Ok(Seed { symbols: e.iter().map(|v| v / s).collect(), latent: self.latent, f_c: self.f_c, scale: s })
    }

    /// Re-applies `scale` and decodes back to latent shape.
    pub fn decompress(&self, received: &[f32], scale: f32) -> Result<LatentFeature, CodecError> {
        if received.len() != self.seed_len() {
            return Err(CodecError::Frame { expected: self.seed_len(), got: received.len() });
        }
        let d = Tensor::vector(received.iter().map(|v| v * scale).collect());
        let out = self.decode_rows(&d)?.into_data();
        Ok(LatentFeature { dims: self.latent, values: out })
    }

    /// Mean squared latent error after passing each latent through `model`
    /// at unit power with a fresh fading draw per latent.
    pub fn channel_loss(&self, latents: &[Vec<f32>], model: &ChannelModel, seed: u64) -> Result<f64, CodecError> {
        let mut rng = stream_rng(seed, 0xC0);
        let (mut total, mut count) = (0.0, 0usize);
        for z in latents {
            let seed = self.compress(&LatentFeature { dims: self.latent, values: z.clone() })?;
            let noise = effective_noise(&mut rng, 1, self.seed_len(), model);
            let rx: Vec<f32> = seed.symbols.iter().zip(&noise).map(|(x, n)| x + n).collect();
            let zh = self.decompress(&rx, seed.scale)?;
            total += zh.values.iter().zip(z).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            count += z.len();
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn to_model(&self) -> ModelFile {
        ModelFile::new()
            .with_meta("kind", "codec")
            .with_meta("f_c", self.f_c)
            .with_meta("trained_snr_db", self.trained_snr_db)
            .with_meta("latent", format!("{},{},{}", self.latent.channels, self.latent.height, self.latent.width))
            .with_network(self.encoder.clone())
            .with_network(self.projection.clone())
            .with_network(self.body.clone())
    }

    pub fn from_model(mut file: ModelFile) -> Result<Self, CodecError> {
        let bad = |m: &str| CodecError::Argument(format!("codec file: {m}"));
        let f_c: f64 = file.meta("f_c")?.parse().map_err(|_| bad("f_c"))?;
        let trained_snr_db: f64 = file.meta("trained_snr_db")?.parse().map_err(|_| bad("trained_snr_db"))?;
        let dims: Vec<usize> = file
            .meta("latent")?
            .split(',')
            .map(|v| v.parse().map_err(|_| bad("latent")))
            .collect::<Result<_, _>>()?;
        let [c, h, w] = dims[..] else { return Err(bad("latent")) };
        let pair = CodecPair {
            encoder: file.take_network("codec_encoder")?,
            projection: file.take_network("codec_projection")?,
            body: file.take_network("codec_body")?,
            latent: Dims::new(c, h, w),
            f_c,
            trained_snr_db,
        };
        if pair.seed_len() != seed_length(pair.latent.len(), f_c)? {
            return Err(bad("seed length disagrees with f_c"));
        }
        Ok(pair)
    }
}

/// Per-symbol noise after zero-forcing at unit power: `n / h_b` for each
/// coherence block of each row.
fn effective_noise(rng: &mut impl Rng, rows: usize, len: usize, model: &ChannelModel) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * len);
    for _ in 0..rows {
        let blocks = model.blocks_for(len);
        let trace = crate::channel::sample_fading_trace(model, blocks, rng.random());
        let n = normal_vec(rng, len);
        for (i, v) in n.into_iter().enumerate() {
            out.push((model.noise_std / trace.gains[i / model.block_length]) as f32 * v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training SNR in dB; `inf` trains without noise.
    #[serde(skip)]
    pub train_snr_db: f64,
    pub channel: ChannelKind,
    pub block_length: usize,
    pub bottleneck: usize,
    pub clip_norm: f64,
    /// Derived from the experiment seed, not configured.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 60,
            learning_rate: 1e-3,
            batch_size: 16,
            train_snr_db: 20.0,
            channel: ChannelKind::Awgn,
            block_length: 16,
            bottleneck: 96,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// Trains encoder and decoder end to end through the channel, drawing fresh
/// fading and noise for every batch.
pub fn train_codec(
    latents: &[Vec<f32>],
    latent: Dims,
    f_c: f64,
    cfg: &CodecTrainConfig,
) -> Result<(CodecPair, TrainLog), CodecError> {
    if latents.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(CodecError::Argument("empty codec training set or schedule".into()));
    }
    if cfg.train_snr_db.is_nan() {
        return Err(CodecError::Argument("training SNR is NaN".into()));
    }
    if let Some(z) = latents.iter().find(|z| z.len() != latent.len()) {
        return Err(CodecError::Dimension { what: "latent", expected: latent.len(), got: z.len() });
    }
    let mut pair = CodecPair::<f32>::new(latent, f_c, cfg.bottleneck, &mut stream_rng(cfg.seed, 0xC1))?;
    pair.trained_snr_db = cfg.train_snr_db;
    let model = ChannelModel::new(cfg.channel, cfg.block_length, snr_to_noise_std(cfg.train_snr_db, 1.0))
        .map_err(|e| CodecError::Argument(e.to_string()))?;
    let mut rng = stream_rng(cfg.seed, 0xC2);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let l = pair.seed_len();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f32]> = batch.iter().map(|&i| latents[i].as_slice()).collect();
            let z = Tensor::from_rows(&rows)?;
            let noise = Tensor::matrix(batch.len(), l, effective_noise(&mut rng, batch.len(), l, &model))?;
            let (loss, mut grads) = pair.loss_and_grads(&z, &noise)?;
            if !loss.is_finite() {
                return Err(CodecError::Training(format!("codec loss diverged in epoch {epoch}")));
            }
            total += loss as f64 * batch.len() as f64;
            count += batch.len();
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(pair.params_mut(), &grads)?;
        }
        log.losses.push(total / count as f64);
    }
    pair.clear_cache();
    Ok((pair, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::parameter_count;

    fn latents(n: usize, seed: u64) -> Vec<Vec<f32>> {
        // low-rank structure so a short seed can carry most of it
        let mut rng = stream_rng(seed, 0);
        let basis: Vec<Vec<f32>> = (0..6).map(|_| normal_vec(&mut rng, 32)).collect();
        (0..n)
            .map(|_| {
                let c = normal_vec(&mut rng, 6);
                (0..32).map(|j| (0..6).map(|k| c[k] * basis[k][j]).sum::<f32>() * 0.5).collect()
            })
            .collect()
    }

    const DIMS: Dims = Dims::new(2, 4, 4);

    #[test]
    fn seed_lengths_from_table() {
        assert_eq!(seed_length(16384, 0.5).unwrap(), 8192);
        assert_eq!(seed_length(16384, 0.1).unwrap(), 1638);
        assert_eq!(seed_length(16384, 0.9).unwrap(), 14746);
        assert!(seed_length(16384, 1.0).is_err());
        assert!(seed_length(16384, 0.0).is_err());
        assert!(seed_length(4, 0.05).is_err());
    }

    #[test]
    fn full_scale_architecture_counts() {
        let (enc, dec) = codec_architecture(16384, 8192, 9000);
        assert_eq!(parameter_count(&enc), 134_225_920);
        let per_layer: Vec<u64> = dec.iter().map(|s| s.parameter_count()).filter(|&c| c > 0).collect();
        assert_eq!(per_layer, vec![134_234_112, 147_465_000, 147_472_384, 32_768]);
        assert_eq!(parameter_count(&enc) + parameter_count(&dec), 563_430_184);
    }

    #[test]
    fn desk_pair_matches_its_architecture() {
        let pair = CodecPair::<f32>::new(Dims::new(2, 8, 8), 0.5, 96, &mut stream_rng(0, 0)).unwrap();
        let (enc, dec) = pair.specs();
        let n = pair.encoder.parameter_count() + pair.projection.parameter_count() + pair.body.parameter_count();
        assert_eq!((parameter_count(&enc) + parameter_count(&dec)) as usize, n);
    }

    #[test]
    fn compress_contract() {
        let pair = CodecPair::<f32>::new(DIMS, 0.25, 12, &mut stream_rng(0, 0)).unwrap();
        let z = LatentFeature::new(DIMS, latents(1, 1).remove(0)).unwrap();
        let seed = pair.compress(&z).unwrap();
        assert_eq!(seed.symbols.len(), seed_length(32, 0.25).unwrap());
        let ms = seed.symbols.iter().map(|v| (v * v) as f64).sum::<f64>() / seed.symbols.len() as f64;
        assert!((ms - 1.0).abs() < 1e-5);
        assert_eq!(seed, pair.compress(&z).unwrap());
        let back = pair.decompress(&seed.symbols, seed.scale).unwrap();
        assert_eq!(back.dims, DIMS);
        assert!(pair.decompress(&seed.symbols[1..], seed.scale).is_err());
        let zeros = pair.decompress(&vec![0.0; seed.symbols.len()], seed.scale).unwrap();
        assert!(zeros.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn composition_gradient_matches_finite_differences() {
        let mut pair = CodecPair::<f32>::new(DIMS, 0.25, 12, &mut stream_rng(3, 0)).unwrap().cast::<f64>();
        let z = Tensor::from_rows(&latents(3, 4).iter().map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()).collect::<Vec<_>>()).unwrap();
        let l = pair.seed_len();
        let noise = Tensor::matrix(3, l, normal_vec(&mut stream_rng(5, 0), 3 * l).iter().map(|&v| 0.3 * v as f64).collect()).unwrap();
        let (_, grads) = pair.loss_and_grads(&z, &noise).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        let n_tensors = grads.len();
        for ti in 0..n_tensors {
            let len = grads[ti].len();
            for j in (0..len).step_by((len / 7).max(1)) {
                let orig = pair.params_mut()[ti].values[j];
                pair.params_mut()[ti].values[j] = orig + h;
                let up = pair.loss_and_grads(&z, &noise).unwrap().0;
                pair.params_mut()[ti].values[j] = orig - h;
                let down = pair.loss_and_grads(&z, &noise).unwrap().0;
                pair.params_mut()[ti].values[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[ti][j];
                let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn noiseless_training_beats_random_and_fits() {
        let data = latents(100, 7);
        let cfg = CodecTrainConfig {
            epochs: 200,
            train_snr_db: f64::INFINITY,
            bottleneck: 24,
            ..Default::default()
        };
        let (pair, log) = train_codec(&data, DIMS, 0.5, &cfg).unwrap();
        assert!(log.last() < log.first());
        let clean = ChannelModel::new(ChannelKind::Awgn, 4, 0.0).unwrap();
        let trained = pair.channel_loss(&data, &clean, 1).unwrap();
        let random = CodecPair::<f32>::new(DIMS, 0.5, 24, &mut stream_rng(9, 0)).unwrap();
        let untrained = random.channel_loss(&data, &clean, 1).unwrap();
        let variance = {
            let n = (data.len() * 32) as f64;
            let mean = data.iter().flatten().map(|&v| v as f64).sum::<f64>() / n;
            data.iter().flatten().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
        };
        assert!(trained < untrained);
        assert!(trained < 0.1 * variance, "{trained} vs variance {variance}");
    }

    #[test]
    fn snr_matched_training_wins() {
        let data = latents(100, 11);
        let base = CodecTrainConfig { epochs: 60, bottleneck: 24, ..Default::default() };
        let low = train_codec(&data, DIMS, 0.5, &CodecTrainConfig { train_snr_db: 0.0, ..base.clone() }).unwrap().0;
        let high = train_codec(&data, DIMS, 0.5, &CodecTrainConfig { train_snr_db: 40.0, ..base }).unwrap().0;
        let test = ChannelModel::at_snr(ChannelKind::Awgn, 16, 0.0).unwrap();
        let (a, b) = (low.channel_loss(&data, &test, 3).unwrap(), high.channel_loss(&data, &test, 3).unwrap());
        assert!(a < b, "matched {a} vs mismatched {b}");
    }

    #[test]
    fn model_file_round_trip() {
        let pair = CodecPair::<f32>::new(DIMS, 0.25, 12, &mut stream_rng(0, 0)).unwrap();
        let back = CodecPair::from_model(ModelFile::from_bytes(&pair.to_model().to_bytes()).unwrap()).unwrap();
        let z = LatentFeature::new(DIMS, latents(1, 2).remove(0)).unwrap();
        assert_eq!(pair.compress(&z).unwrap(), back.compress(&z).unwrap());
        assert_eq!(back.latent, DIMS);
    }
}
