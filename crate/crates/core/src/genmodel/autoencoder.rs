use rand::seq::SliceRandom;
use rand::Rng;

use super::{check_len, Dims, GenConfig, GenError, LatentFeature, PixelImage};
use crate::nn::{clip_global_norm, Activation, Adam, Mlp, ModelFile, Tensor};
use crate::rng::stream_rng;

/// Pixel-to-latent encoder and latent-to-pixel decoder.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub image: Dims,
    pub latent: Dims,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the `mean(z^2)` pull toward a zero-centred latent.
    pub lambda: f64,
    pub clip_norm: f64,
    /// Derived from the experiment seed, not configured.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            epochs: 40,
            learning_rate: 1e-3,
            batch_size: 16,
            lambda: 1e-3,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// Mean loss per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn first(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

impl Autoencoder {
    /// Two-layer tanh encoder and decoder.
    pub fn new(cfg: &GenConfig, rng: &mut impl Rng) -> Self {
        let (p, z, h) = (cfg.image.len(), cfg.latent_dims().len(), cfg.ae_hidden);
        Autoencoder {
            encoder: Mlp::dense_stack("encoder", &[p, h, z], Activation::Tanh, Activation::None, rng),
            decoder: Mlp::dense_stack("decoder", &[z, h, p], Activation::Tanh, Activation::None, rng),
            image: cfg.image,
            latent: cfg.latent_dims(),
        }
    }

    /// Single linear layer each way.
    pub fn linear(image: Dims, latent: Dims, rng: &mut impl Rng) -> Self {
        Autoencoder {
            encoder: Mlp::new("encoder").dense(image.len(), latent.len(), Activation::None, rng),
            decoder: Mlp::new("decoder").dense(latent.len(), image.len(), Activation::None, rng),
            image,
            latent,
        }
    }

    pub fn encode_image(&self, image: &PixelImage) -> Result<LatentFeature, GenError> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn encode_batch(&self, images: &[PixelImage]) -> Result<Vec<LatentFeature>, GenError> {
        for img in images {
            check_len("image", self.image.len(), img.values.len())?;
        }
        let rows: Vec<&[f32]> = images.iter().map(|i| i.values.as_slice()).collect();
        let z = self.encoder.infer(&Tensor::from_rows(&rows)?)?;
        (0..images.len()).map(|r| LatentFeature::new(self.latent, z.row(r).to_vec())).collect()
    }

    /// Decoder output clamped to `[0, 1]`.
    pub fn decode_latent(&self, latent: &[f32]) -> Result<PixelImage, GenError> {
        Ok(self.decode_batch(&[latent])?.remove(0))
    }

    pub fn decode_batch<R: AsRef<[f32]>>(&self, latents: &[R]) -> Result<Vec<PixelImage>, GenError> {
        for z in latents {
            check_len("latent", self.latent.len(), z.as_ref().len())?;
        }
        let out = self.decoder.infer(&Tensor::from_rows(latents)?)?;
        (0..latents.len())
            .map(|r| PixelImage::new(self.image, out.row(r).iter().map(|v| v.clamp(0.0, 1.0)).collect()))
            .collect()
    }

    /// Mean of `reconstruction MSE + lambda * mean(z^2)` over `images`.
    pub fn loss(&self, images: &[PixelImage], lambda: f64) -> Result<f64, GenError> {
        let rows: Vec<&[f32]> = images.iter().map(|i| i.values.as_slice()).collect();
        let x = Tensor::from_rows(&rows)?;
        let z = self.encoder.infer(&x)?;
        let y = self.decoder.infer(&z)?;
        Ok(mean_sq_diff(y.data(), x.data()) + lambda * mean_sq(z.data()))
    }

    /// Minibatch Adam on the reconstruction objective.
    pub fn fit(&mut self, images: &[PixelImage], cfg: &AeTrainConfig) -> Result<TrainLog, GenError> {
        if images.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
            return Err(GenError::Argument("empty autoencoder training set or schedule".into()));
        }
        for img in images {
            check_len("image", self.image.len(), img.values.len())?;
        }
        let mut rng = stream_rng(cfg.seed, 0xAE);
        let mut enc_opt = Adam::new(cfg.learning_rate);
        let mut dec_opt = Adam::new(cfg.learning_rate);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut log = TrainLog::default();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (mut total, mut count) = (0.0, 0usize);
            for batch in order.chunks(cfg.batch_size) {
                let rows: Vec<&[f32]> = batch.iter().map(|&i| images[i].values.as_slice()).collect();
                let x = Tensor::from_rows(&rows)?;
                let z = self.encoder.forward(&x)?;
                let y = self.decoder.forward(&z)?;
                let loss = mean_sq_diff(y.data(), x.data()) + cfg.lambda * mean_sq(z.data());
                if !loss.is_finite() {
                    return Err(GenError::Training(format!("autoencoder loss diverged in epoch {epoch}")));
                }
                total += loss * batch.len() as f64;
                count += batch.len();
                let scale = 2.0 / y.len() as f32;
                let gy: Vec<f32> = y.data().iter().zip(x.data()).map(|(a, b)| scale * (a - b)).collect();
                let (mut gz, mut dec_grads) = self.decoder.backward(&Tensor::new(y.shape().to_vec(), gy)?)?;
                let reg = (2.0 * cfg.lambda / z.len() as f64) as f32;
                for (g, v) in gz.data_mut().iter_mut().zip(z.data()) {
                    *g += reg * v;
                }
                let (_, mut enc_grads) = self.encoder.backward(&gz)?;
                clip_global_norm(&mut dec_grads, cfg.clip_norm);
                clip_global_norm(&mut enc_grads, cfg.clip_norm);
                dec_opt.step(self.decoder.params_mut(), &dec_grads)?;
                enc_opt.step(self.encoder.params_mut(), &enc_grads)?;
            }
            log.losses.push(total / count as f64);
        }
        self.encoder.clear_cache();
        self.decoder.clear_cache();
        Ok(log)
    }

    pub fn to_model(&self) -> ModelFile {
        ModelFile::new()
            .with_meta("kind", "autoencoder")
            .with_meta("image", self.image)
            .with_meta("latent", self.latent)
            .with_network(self.encoder.clone())
            .with_network(self.decoder.clone())
    }

    pub fn from_model(mut file: ModelFile, cfg: &GenConfig) -> Result<Self, GenError> {
        let encoder = file.take_network("encoder")?;
        let decoder = file.take_network("decoder")?;
        let ae = Autoencoder { encoder, decoder, image: cfg.image, latent: cfg.latent_dims() };
        if ae.encoder.input_size() != Some(ae.image.len()) || ae.decoder.input_size() != Some(ae.latent.len()) {
            return Err(GenError::Argument("autoencoder file does not match the configuration".into()));
        }
        Ok(ae)
    }
}

/// Builds and trains the default autoencoder on `images`.
pub fn train_autoencoder(
    images: &[PixelImage],
    gen: &GenConfig,
    cfg: &AeTrainConfig,
) -> Result<(Autoencoder, TrainLog), GenError> {
    gen.validate()?;
    let mut ae = Autoencoder::new(gen, &mut stream_rng(cfg.seed, 0xAE0));
    let log = ae.fit(images, cfg)?;
    Ok((ae, log))
}

fn mean_sq_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

fn mean_sq(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}
