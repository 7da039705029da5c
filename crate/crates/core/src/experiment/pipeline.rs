//! Cached training of the model bundle: autoencoder, then denoiser, then one
//! codec per `(f_c, training SNR)`.
//!
//! Each stage has a key hashed from the config sections it depends on and
//! the key of the stage before it. A model file whose stored key matches is
//! reused; anything else is retrained and overwritten.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{sha256_hex, short_hash, ExperimentConfig, Preset};
use super::ExperimentError;
use crate::genmodel::{
    embed_prompt, train_autoencoder, train_denoiser, Autoencoder, Corpus, Denoiser, NoiseSchedule, PromptEmbedding,
    PromptGrammar,
};
use crate::metrics::FeatureExtractor;
use crate::nn::ModelFile;
use crate::protocol::Deployment;
use crate::rng::derive_seed;
use crate::seedcodec::{train_codec, CodecPair, CodecTrainConfig};

pub const MANIFEST_SCHEMA: &str = "meg-bundle/2";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub stage: String,
    pub stage_key: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    /// [`ExperimentConfig::bundle_hash`] of the training config.
    pub bundle_hash: String,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub file: String,
    pub cache_hit: bool,
    pub seconds: f64,
    /// Last logged training loss; `None` on a cache hit.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
    pub manifest: Manifest,
}

impl TrainReport {
    pub fn retrained(&self) -> Vec<&str> {
        self.stages.iter().filter(|s| !s.cache_hit).map(|s| s.stage.as_str()).collect()
    }
}

fn section_key<T: Serialize>(parts: &[&str], section: &T) -> String {
    let mut text = parts.join("\n");
    text.push('\n');
    text.push_str(&serde_json::to_string(section).expect("section serializes"));
    short_hash(text.as_bytes())
}

pub fn codec_file(f_c: f64, snr_db: f64) -> String {
    format!("codec-fc{f_c}-snr{snr_db}.megn")
}

/// Reads a cached model if its stored stage key matches.
fn cached(path: &Path, key: &str) -> Option<ModelFile> {
    let file = ModelFile::load(path).ok()?;
    (file.meta("stage_key").ok()? == key).then_some(file)
}

fn stage_err(stage: &str) -> impl Fn(Box<dyn std::error::Error + Send + Sync>) -> ExperimentError + '_ {
    move |source| ExperimentError::Stage { stage: stage.to_string(), source }
}

fn write_model(path: &Path, file: ModelFile) -> Result<Vec<u8>, ExperimentError> {
    let bytes = file.to_bytes();
    std::fs::write(path, &bytes).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
    Ok(bytes)
}

struct Stages<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    reports: Vec<StageReport>,
    entries: Vec<ManifestEntry>,
}

impl Stages<'_> {
    /// Loads `file` when its key matches, otherwise runs `train`, which
    /// returns the model and its final loss.
    fn run(
        &mut self,
        stage: &str,
        file: &str,
        key: &str,
        train: impl FnOnce() -> Result<(ModelFile, Option<f64>), ExperimentError>,
    ) -> Result<ModelFile, ExperimentError> {
        let path = self.dir.join(file);
        let start = Instant::now();
        let (model, hit, loss) = match cached(&path, key) {
            Some(m) => (m, true, None),
            None => {
                log::info!("training {stage}");
                let (m, loss) = train()?;
                let m = m.with_meta("stage_key", key).with_meta("bundle_hash", self.cfg.bundle_hash());
                write_model(&path, m.clone())?;
                (m, false, loss)
            }
        };
        let bytes = std::fs::read(&path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
        self.entries.push(ManifestEntry {
            file: file.to_string(),
            stage: stage.to_string(),
            stage_key: key.to_string(),
            sha256: sha256_hex(&bytes),
        });
        self.reports.push(StageReport {
            stage: stage.to_string(),
            file: file.to_string(),
            cache_hit: hit,
            seconds: start.elapsed().as_secs_f64(),
            final_loss: loss,
        });
        Ok(model)
    }
}

/// Trains (or reloads) every component into `dir` and writes the manifest.
pub fn train_bundle(cfg: &ExperimentConfig, dir: &Path) -> Result<(Deployment, TrainReport), ExperimentError> {
    cfg.validate()?;
    if cfg.preset == Preset::PaperArithmetic {
        return Err(ExperimentError::Config(
            "the paper-arithmetic preset only supports `table`; train with the desk preset".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::Io(format!("{}: {e}", dir.display())))?;
    let mut st = Stages { cfg, dir, reports: Vec::new(), entries: Vec::new() };
    let seed = cfg.seed.to_string();
    let gen = &cfg.model;
    let prompts = PromptGrammar.all();

    let ae_key = section_key(&["autoencoder", &seed, &serde_json::to_string(gen).expect("serializes")], &(&cfg.data, &cfg.autoencoder));
    let corpus = || Corpus::generate(prompts.clone(), gen.image, cfg.data.per_prompt, derive_seed(cfg.seed, "corpus"));
    let ae_model = st.run("autoencoder", "autoencoder.megn", &ae_key, || {
        let err = stage_err("autoencoder");
        let data = corpus().map_err(|e| err(e.into()))?;
        let ae_cfg = crate::genmodel::AeTrainConfig { seed: derive_seed(cfg.seed, "autoencoder"), ..cfg.autoencoder.clone() };
        let (ae, log) = train_autoencoder(&data.images, gen, &ae_cfg).map_err(|e| err(e.into()))?;
        Ok((ae.to_model(), Some(log.last())))
    })?;
    let autoencoder = Autoencoder::from_model(ae_model, gen)?;

    let schedule = NoiseSchedule::linear(gen.steps)?;
    let den_key = section_key(&["denoiser", &ae_key], &cfg.denoiser);
    let den_model = st.run("denoiser", "denoiser.megn", &den_key, || {
        let err = stage_err("denoiser");
        let data = corpus().map_err(|e| err(e.into()))?;
        let latents: Vec<Vec<f32>> = autoencoder
            .encode_batch(&data.images)
            .map_err(|e| err(e.into()))?
            .into_iter()
            .map(|z| z.values)
            .collect();
        let embeddings: Vec<PromptEmbedding> = data
            .prompts
            .iter()
            .map(|p| embed_prompt(p, gen.max_tokens, gen.embed_dim))
            .collect::<Result<_, _>>()
            .map_err(|e| err(e.into()))?;
        let per_image: Vec<&PromptEmbedding> = data.prompt_of.iter().map(|&p| &embeddings[p]).collect();
        let den_cfg = crate::genmodel::DenoiserTrainConfig {
            seed: derive_seed(cfg.seed, "denoiser"),
            ..cfg.denoiser.clone()
        };
        let (den, log) = train_denoiser(&latents, &per_image, &schedule, gen, &den_cfg).map_err(|e| err(e.into()))?;
        Ok((den.to_model(), Some(log.last())))
    })?;
    let denoiser = Denoiser::from_model(den_model, gen)?;

    let mut deploy = Deployment {
        gen: gen.clone(),
        autoencoder,
        denoiser,
        schedule,
        codecs: Vec::new(),
        extractor: FeatureExtractor::standard(gen.image),
    };
    let mut codec_latents: Option<Vec<Vec<f32>>> = None;
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for &f in &cfg.codec.rates {
        for &s in &cfg.codec.train_snrs_db {
            pairs.push((f, s));
        }
    }
    for (f_c, snr) in pairs {
        let stage = format!("codec f_c={f_c} snr={snr}");
        let key = section_key(
            &["codec", &den_key, &cfg.data.codec_samples_per_prompt.to_string(), &f_c.to_string(), &snr.to_string()],
            &cfg.codec.train,
        );
        let file = codec_file(f_c, snr);
        let model = st.run(&stage, &file, &key, || {
            let err = stage_err(&stage);
            if codec_latents.is_none() {
                codec_latents = Some(sample_codec_latents(&deploy, cfg).map_err(|e| err(e.into()))?);
            }
            let latents = codec_latents.as_ref().expect("filled above");
            let train_cfg = CodecTrainConfig {
                train_snr_db: snr,
                seed: derive_seed(cfg.seed, &format!("codec/{f_c}/{snr}")),
                ..cfg.codec.train.clone()
            };
            let (pair, log) = train_codec(latents, gen.latent_dims(), f_c, &train_cfg).map_err(|e| err(e.into()))?;
            Ok((pair.to_model(), Some(log.last())))
        })?;
        deploy.codecs.push(CodecPair::from_model(model)?);
    }
    let manifest = Manifest { schema: MANIFEST_SCHEMA.into(), bundle_hash: cfg.bundle_hash(), files: st.entries };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
    Ok((deploy, TrainReport { stages: st.reports, manifest }))
}

/// DDIM samples from every prompt, the distribution the ES compresses.
fn sample_codec_latents(deploy: &Deployment, cfg: &ExperimentConfig) -> Result<Vec<Vec<f32>>, ExperimentError> {
    use rayon::prelude::*;
    let prompts = PromptGrammar.all();
    let k = cfg.data.codec_samples_per_prompt;
    (0..prompts.len() * k)
        .into_par_iter()
        .map(|j| {
            let noise = derive_seed(cfg.seed, &format!("codec-data/{}/{}", j / k, j % k));
            Ok(deploy.latent_for(&prompts[j / k], noise)?.values)
        })
        .collect()
}

/// Loads a bundle trained with this config's training sections.
pub fn load_bundle(cfg: &ExperimentConfig, dir: &Path) -> Result<Deployment, ExperimentError> {
    let path = dir.join(MANIFEST_FILE);
    let missing = || {
        ExperimentError::MissingBundle(format!(
            "no trained bundle for training config {} in {}; run `meg train` with the same config first",
            cfg.bundle_hash(),
            dir.display()
        ))
    };
    let text = std::fs::read_to_string(&path).map_err(|_| missing())?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("bad manifest: {e}")))?;
    if manifest.bundle_hash != cfg.bundle_hash() {
        return Err(missing());
    }
    for entry in &manifest.files {
        let bytes = std::fs::read(dir.join(&entry.file)).map_err(|_| missing())?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(ExperimentError::MissingBundle(format!(
                "{} changed since training; rerun `meg train`",
                entry.file
            )));
        }
    }
    let gen = &cfg.model;
    let load = |f: &str| ModelFile::load(&dir.join(f)).map_err(|_| missing());
    let autoencoder = Autoencoder::from_model(load("autoencoder.megn")?, gen)?;
    let denoiser = Denoiser::from_model(load("denoiser.megn")?, gen)?;
    let mut codecs = Vec::new();
    for &f in &cfg.codec.rates {
        for &s in &cfg.codec.train_snrs_db {
            codecs.push(CodecPair::from_model(load(&codec_file(f, s))?)?);
        }
    }
    Ok(Deployment {
        gen: gen.clone(),
        autoencoder,
        denoiser,
        schedule: NoiseSchedule::linear(gen.steps)?,
        codecs,
        extractor: FeatureExtractor::standard(gen.image),
    })
}

/// Default bundle location under an output directory.
pub fn bundle_dir(out: &Path) -> PathBuf {
    out.join("bundle")
}
