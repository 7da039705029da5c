//! Edge-inferencing flow: the edge server (ES) turns a prompt into a seed
//! frame, the frame crosses the channel block by block, and the user
//! equipment (UE) decodes the final image.

mod frame;
mod session;

pub use frame::{fixed_rate, SeedFrame, FLAG_UNCODED, FRAME_MAGIC, FRAME_VERSION, HEADER_LEN};
pub use session::{EsEvent, EsSession, EsState, Machine, Session, UeEvent, UeSession, UeState};

/// Payload carries pixels rather than a latent.
pub const FLAG_PIXELS: u8 = 0b0000_0010;
/// The high nibble of the flags selects among deployed codecs of equal rate.
pub const CODEC_SLOT_SHIFT: u8 = 4;

use thiserror::Error;

use crate::channel::{
    pass_blocks, sample_fading_trace, snr_to_noise_std, ChannelError, ChannelKind, ChannelModel, FadingTrace,
    Reception,
};
use crate::genmodel::{
    embed_prompt, generate_latent, Autoencoder, Denoiser, Dims, GenConfig, GenError, LatentFeature, NoiseSchedule,
    PixelImage,
};
use crate::metrics::{fid, image_mse, image_psnr, FeatureExtractor, MetricError, MetricReport, Mode};
use crate::rng::{normal_vec, stream_rng};
use crate::seedcodec::{CodecError, CodecPair, Seed};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("frame error: {0}")]
    Frame(String),
    #[error("illegal transition: {0}")]
    IllegalTransition(String),
    #[error("configuration mismatch: {0}")]
    Config(String),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Everything the ES and UE need: shared read-only model handles.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub gen: GenConfig,
    pub autoencoder: Autoencoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    /// One pair per `(f_c, training SNR)`.
    pub codecs: Vec<CodecPair>,
    pub extractor: FeatureExtractor,
}

impl Deployment {
    /// Randomly initialized models; useful for plumbing and exactness checks.
    pub fn untrained(gen: GenConfig, rates: &[f64], seed: u64) -> Result<Self, ProtocolError> {
        gen.validate()?;
        let mut rng = stream_rng(seed, 0);
        let codecs = rates
            .iter()
            .map(|&f| CodecPair::new(gen.latent_dims(), f, 96, &mut rng))
            .collect::<Result<_, _>>()?;
        Ok(Deployment {
            autoencoder: Autoencoder::new(&gen, &mut rng),
            denoiser: Denoiser::new(&gen, &mut rng),
            schedule: NoiseSchedule::linear(gen.steps)?,
            extractor: FeatureExtractor::standard(gen.image),
            codecs,
            gen,
        })
    }

    /// The pair for `f_c` whose training SNR is closest to `snr_db`
    /// (`None` picks the cleanest-trained pair).
    pub fn codec_for(&self, f_c: f64, snr_db: Option<f64>) -> Result<&CodecPair, ProtocolError> {
        let key = |s: f64| s.clamp(-1e3, 1e3);
        self.codecs
            .iter()
            .filter(|c| fixed_rate(c.f_c) == fixed_rate(f_c))
            .min_by(|a, b| {
                let da = snr_db.map_or(-key(a.trained_snr_db), |s| (key(a.trained_snr_db) - key(s)).abs());
                let db = snr_db.map_or(-key(b.trained_snr_db), |s| (key(b.trained_snr_db) - key(s)).abs());
                da.total_cmp(&db)
            })
            .ok_or_else(|| ProtocolError::Config(format!("no codec deployed for f_c = {f_c}")))
    }

    /// Runs the sampler for `prompt` from initial noise drawn with `noise_seed`.
    pub fn latent_for(&self, prompt: &str, noise_seed: u64) -> Result<LatentFeature, ProtocolError> {
        let emb = embed_prompt(prompt, self.gen.max_tokens, self.gen.embed_dim)?;
        let dims = self.gen.latent_dims();
        let z_t = normal_vec(&mut stream_rng(noise_seed, 0), dims.len());
        let z = generate_latent(&self.denoiser, &emb, &z_t, &self.schedule, None)?;
        Ok(LatentFeature::new(dims, z)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub f_c: f64,
    pub image: Dims,
    /// Seeds the initial diffusion noise.
    pub noise_seed: u64,
    /// Link SNR known to the ES, used to pick the matching codec.
    pub link_snr_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EsOutput {
    pub latent: LatentFeature,
    pub seed: Seed,
    pub frame: SeedFrame,
    pub session: EsSession,
}

/// Embed, sample, compress and frame. The returned session is left in
/// `Transmitting`.
pub fn es_handle_request(
    deploy: &Deployment,
    request: &GenerationRequest,
    block_length: usize,
) -> Result<EsOutput, ProtocolError> {
    if request.image != deploy.gen.image {
        return Err(ProtocolError::Config(format!(
            "request asks for {} images, deployment produces {}",
            request.image, deploy.gen.image
        )));
    }
    let mut session = EsSession::default();
    session.fire(EsEvent::Request)?;
    let codec = deploy.codec_for(request.f_c, request.link_snr_db)?;
    let latent = deploy.latent_for(&request.prompt, request.noise_seed)?;
    let seed = codec.compress(&latent)?;
    let mut frame = SeedFrame::new(codec.f_c, latent.dims, seed.scale, block_length, seed.symbols.clone())?;
    frame.flags = codec_slot(deploy, codec) << CODEC_SLOT_SHIFT;
    session.fire(EsEvent::SeedReady)?;
    Ok(EsOutput { latent, seed, frame, session })
}

/// Contiguous blocks; the last may be short.
pub fn chunk_seed(symbols: &[f32], block_length: usize) -> Vec<&[f32]> {
    symbols.chunks(block_length.max(1)).collect()
}

/// Unit-power framing of an uncoded vector (pixels or a raw latent).
pub fn uncoded_frame(values: &[f32], dims: Dims, pixels: bool, block_length: usize) -> Result<SeedFrame, ProtocolError> {
    let ms = values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / values.len().max(1) as f64;
    let scale = ms.sqrt().max(1e-12) as f32;
    let mut frame = SeedFrame::new(0.0, dims, scale, block_length, values.iter().map(|v| v / scale).collect())?;
    frame.flags = FLAG_UNCODED | if pixels { FLAG_PIXELS } else { 0 };
    Ok(frame)
}

/// Sends the frame payload block by block. With `perfect` the channel is
/// bypassed entirely.
pub fn transmit_frame(
    frame: &SeedFrame,
    gains: &[f64],
    powers: &[f64],
    noise_std: f64,
    rng: &mut impl rand::Rng,
    perfect: bool,
) -> Result<Reception, ProtocolError> {
    let blocks = frame.payload.len().div_ceil(frame.block_length.max(1) as usize);
    if perfect {
        return Ok(Reception { symbols: frame.payload.clone(), erased: vec![false; blocks] });
    }
    Ok(pass_blocks(&frame.payload, frame.block_length as usize, gains, powers, noise_std, rng)?)
}

#[derive(Debug, Clone)]
pub struct UeOutput {
    pub image: PixelImage,
    /// Latent handed to the image decoder (absent for pixel frames).
    pub latent: Option<LatentFeature>,
    /// At least one block was erased.
    pub degraded: bool,
    pub session: UeSession,
}

/// Checks the header, reassembles the payload and decodes the image.
pub fn ue_receive(deploy: &Deployment, header: &[u8], rx: &Reception) -> Result<UeOutput, ProtocolError> {
    let mut session = UeSession::default();
    if header.len() < HEADER_LEN {
        return Err(ProtocolError::Frame("truncated header".into()));
    }
    // header travels noise-free; re-attach the received payload for parsing
    let promised = u32::from_le_bytes(header[22..26].try_into().expect("4 bytes")) as usize;
    if promised != rx.symbols.len() {
        return Err(ProtocolError::Frame(format!(
            "header promises {promised} symbols, received {}",
            rx.symbols.len()
        )));
    }
    let mut bytes = header[..HEADER_LEN].to_vec();
    for v in &rx.symbols {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let frame = SeedFrame::decode(&bytes)?;
    session.fire(UeEvent::Header)?;
    session.fire(UeEvent::Complete)?;
    let scaled = |s: f32| -> Vec<f32> { frame.payload.iter().map(|v| v * s).collect() };
    let (image, latent) = if frame.flags & FLAG_PIXELS != 0 {
        let values = scaled(frame.scale).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        (PixelImage::new(frame.latent_dims(), values)?, None)
    } else if frame.flags & FLAG_UNCODED != 0 {
        let z = LatentFeature::new(frame.latent_dims(), scaled(frame.scale))?;
        (deploy.autoencoder.decode_latent(&z.values)?, Some(z))
    } else {
        let slot = (frame.flags >> CODEC_SLOT_SHIFT) as usize;
        let codec = deploy
            .codecs
            .iter()
            .filter(|c| fixed_rate(c.f_c) == frame.f_c_fixed && c.latent == frame.latent_dims())
            .nth(slot)
            .ok_or_else(|| ProtocolError::Config(format!("UE has no codec #{slot} for f_c = {}", frame.f_c())))?;
        let z = codec.decompress(&frame.payload, frame.scale)?;
        (deploy.autoencoder.decode_latent(&z.values)?, Some(z))
    };
    session.fire(UeEvent::Decoded)?;
    Ok(UeOutput { image, latent, degraded: rx.any_erased(), session })
}

/// Index of `codec` among the deployed pairs with the same rate.
fn codec_slot(deploy: &Deployment, codec: &CodecPair) -> u8 {
    deploy
        .codecs
        .iter()
        .filter(|c| fixed_rate(c.f_c) == fixed_rate(codec.f_c))
        .position(|c| std::ptr::eq(c, codec))
        .unwrap_or(0) as u8
}

#[derive(Debug, Clone)]
pub struct E2eConfig {
    pub prompts: Vec<String>,
    pub f_c: f64,
    pub snr_db: f64,
    pub channel: ChannelKind,
    pub block_length: usize,
    pub trace_seed: u64,
    /// Seeds the per-prompt initial diffusion noise.
    pub noise_seed: u64,
    /// Seeds the per-image channel noise, shared by every mode.
    pub channel_seed: u64,
    /// Bypass the channel: every mode receives its payload exactly.
    pub perfect_channel: bool,
    /// Per-block powers for MEG seeds; unit power when absent.
    pub meg_powers: Option<Vec<f64>>,
    pub modes: Vec<Mode>,
    pub config_hash: String,
}

impl E2eConfig {
    pub fn new(prompts: Vec<String>, f_c: f64, snr_db: f64) -> Self {
        E2eConfig {
            prompts,
            f_c,
            snr_db,
            channel: ChannelKind::Awgn,
            block_length: 16,
            trace_seed: 1,
            noise_seed: 2,
            channel_seed: 3,
            perfect_channel: false,
            meg_powers: None,
            modes: Mode::ALL.to_vec(),
            config_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub mode: Mode,
    pub images: Vec<PixelImage>,
    pub report: MetricReport,
    /// Per image, the power used on each block.
    pub powers: Vec<Vec<f64>>,
    pub degraded: Vec<bool>,
    pub trace_seed: u64,
    pub symbols_per_image: usize,
}

#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub trace: FadingTrace,
    /// Perfect-channel images `D(z)` for each prompt.
    pub truth: Vec<PixelImage>,
    pub latents: Vec<LatentFeature>,
    pub results: Vec<GenerationResult>,
}

impl EndToEnd {
    pub fn result(&self, mode: Mode) -> Option<&GenerationResult> {
        self.results.iter().find(|r| r.mode == mode)
    }
}

/// Generates every prompt once, then delivers it in each requested mode
/// over segments of one shared fading trace with shared noise seeds.
pub fn run_end_to_end(deploy: &Deployment, cfg: &E2eConfig) -> Result<EndToEnd, ProtocolError> {
    if cfg.prompts.is_empty() {
        return Err(ProtocolError::Config("no prompts".into()));
    }
    let model = ChannelModel::new(cfg.channel, cfg.block_length, snr_to_noise_std(cfg.snr_db, 1.0))?;
    let link = if cfg.snr_db.is_finite() { Some(cfg.snr_db) } else { None };
    let mut es = Vec::with_capacity(cfg.prompts.len());
    for (i, prompt) in cfg.prompts.iter().enumerate() {
        let req = GenerationRequest {
            prompt: prompt.clone(),
            f_c: cfg.f_c,
            image: deploy.gen.image,
            noise_seed: crate::rng::derive_seed(cfg.noise_seed, &format!("prompt/{i}")),
            link_snr_db: link,
        };
        es.push(es_handle_request(deploy, &req, cfg.block_length)?);
    }
    let latents: Vec<LatentFeature> = es.iter().map(|o| o.latent.clone()).collect();
    let truth = deploy.autoencoder.decode_batch(&latents.iter().map(|z| z.values.as_slice()).collect::<Vec<_>>())?;
    let frames_for = |mode: Mode| -> Result<Vec<SeedFrame>, ProtocolError> {
        (0..es.len())
            .map(|i| match mode {
                Mode::Meg => Ok(es[i].frame.clone()),
                Mode::RawFeature => uncoded_frame(&latents[i].values, latents[i].dims, false, cfg.block_length),
                Mode::Centralized => uncoded_frame(&truth[i].values, truth[i].dims, true, cfg.block_length),
            })
            .collect()
    };
    let all_frames: Vec<(Mode, Vec<SeedFrame>)> =
        cfg.modes.iter().map(|&m| frames_for(m).map(|f| (m, f))).collect::<Result<_, _>>()?;
    let max_blocks = all_frames
        .iter()
        .flat_map(|(_, fs)| fs.iter().map(|f| model.blocks_for(f.payload.len())))
        .max()
        .unwrap_or(1);
    let trace = sample_fading_trace(&model, max_blocks * cfg.prompts.len(), cfg.trace_seed);
    let mut results = Vec::new();
    for (mode, frames) in all_frames {
        let mut images = Vec::with_capacity(frames.len());
        let (mut powers, mut degraded) = (Vec::new(), Vec::new());
        for (i, frame) in frames.iter().enumerate() {
            let blocks = model.blocks_for(frame.payload.len());
            let gains = &trace.gains[i * max_blocks..i * max_blocks + blocks];
            let p = match (&cfg.meg_powers, mode) {
                (Some(schedule), Mode::Meg) => {
                    if schedule.len() < blocks {
                        return Err(ProtocolError::Config(format!(
                            "{} powers for {blocks} blocks",
                            schedule.len()
                        )));
                    }
                    schedule[..blocks].to_vec()
                }
                _ => vec![1.0; blocks],
            };
            let mut rng = stream_rng(cfg.channel_seed, i as u64);
            let rx = transmit_frame(frame, gains, &p, model.noise_std, &mut rng, cfg.perfect_channel)?;
            let ue = ue_receive(deploy, &frame.header_bytes(), &rx)?;
            images.push(ue.image);
            powers.push(p);
            degraded.push(ue.degraded);
        }
        let report = batch_report(mode, &images, &truth, &deploy.extractor, frames[0].payload.len(), &cfg.config_hash)?;
        results.push(GenerationResult {
            mode,
            images,
            report,
            powers,
            degraded,
            trace_seed: trace.seed,
            symbols_per_image: frames[0].payload.len(),
        });
    }
    for out in &mut es {
        out.session.fire(EsEvent::Sent)?;
    }
    Ok(EndToEnd { trace, truth, latents, results })
}

/// Mean per-image PSNR and MSE plus the batch FID-proxy.
pub fn batch_report(
    mode: Mode,
    images: &[PixelImage],
    truth: &[PixelImage],
    extractor: &FeatureExtractor,
    symbols: usize,
    config_hash: &str,
) -> Result<MetricReport, ProtocolError> {
    let n = images.len() as f64;
    let mut psnr = 0.0;
    let mut mse = 0.0;
    for (g, t) in images.iter().zip(truth) {
        psnr += image_psnr(g, t)?;
        mse += image_mse(g, t)?;
    }
    let fid_proxy = if images.len() >= 2 { fid(images, truth, extractor)? } else { f64::NAN };
    Ok(MetricReport {
        mode,
        psnr_db: psnr / n,
        fid_proxy,
        mse: mse / n,
        symbols,
        config_hash: config_hash.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::PromptGrammar;
    use crate::metrics::symbol_count;

    fn deploy() -> Deployment {
        Deployment::untrained(GenConfig::desk(), &[0.5, 0.25], 4).unwrap()
    }

    #[test]
    fn chunking() {
        let s: Vec<f32> = (0..10).map(|v| v as f32).collect();
        let sizes: Vec<usize> = chunk_seed(&s, 3).iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert_eq!(chunk_seed(&s, 10).len(), 1);
        assert_eq!(chunk_seed(&s, 64).len(), 1);
        assert_eq!(chunk_seed(&s, 3).concat(), s);
    }

    #[test]
    fn es_output_contract() {
        let d = deploy();
        let req = GenerationRequest {
            prompt: "bright small circle left".into(),
            f_c: 0.5,
            image: d.gen.image,
            noise_seed: 9,
            link_snr_db: None,
        };
        let a = es_handle_request(&d, &req, 16).unwrap();
        let b = es_handle_request(&d, &req, 16).unwrap();
        assert_eq!(a.frame.payload.len(), 64);
        assert_eq!(a.frame.encode(), b.frame.encode());
        assert_eq!(SeedFrame::decode(&a.frame.encode()).unwrap(), a.frame);
        assert_eq!(a.session.state(), EsState::Transmitting);
        let wrong = GenerationRequest { image: Dims::new(1, 64, 64), ..req };
        assert!(matches!(es_handle_request(&d, &wrong, 16), Err(ProtocolError::Config(_))));
    }

    #[test]
    fn noiseless_link_matches_local_pipeline() {
        let d = deploy();
        let req = GenerationRequest {
            prompt: "dim large ring top".into(),
            f_c: 0.25,
            image: d.gen.image,
            noise_seed: 4,
            link_snr_db: None,
        };
        let es = es_handle_request(&d, &req, 8).unwrap();
        let codec = d.codec_for(0.25, None).unwrap();
        let local = d.autoencoder.decode_latent(&codec.decompress(&es.seed.symbols, es.seed.scale).unwrap().values).unwrap();
        let blocks = es.frame.payload.len().div_ceil(8);
        let gains: Vec<f64> = (0..blocks).map(|b| 0.3 + 0.2 * b as f64).collect();
        let powers = vec![0.7; blocks];
        let rx = transmit_frame(&es.frame, &gains, &powers, 0.0, &mut stream_rng(0, 0), false).unwrap();
        let ue = ue_receive(&d, &es.frame.header_bytes(), &rx).unwrap();
        let worst = ue.image.values.iter().zip(&local.values).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst < 1e-6, "{worst}");
        assert_eq!(ue.session.state(), UeState::Done);
    }

    #[test]
    fn full_erasure_is_finite_and_flagged() {
        let d = deploy();
        let req = GenerationRequest {
            prompt: "bright large cross center".into(),
            f_c: 0.5,
            image: d.gen.image,
            noise_seed: 1,
            link_snr_db: None,
        };
        let es = es_handle_request(&d, &req, 16).unwrap();
        let rx = transmit_frame(&es.frame, &[1.0; 4], &[0.0; 4], 0.1, &mut stream_rng(0, 0), false).unwrap();
        let ue = ue_receive(&d, &es.frame.header_bytes(), &rx).unwrap();
        assert!(ue.degraded);
        assert!(ue.image.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let d = deploy();
        let frame = uncoded_frame(&[0.5; 8], Dims::new(2, 2, 2), false, 4).unwrap();
        let mut header = frame.header_bytes();
        header[15] ^= 1;
        let rx = Reception { symbols: frame.payload.clone(), erased: vec![false; 2] };
        assert!(matches!(ue_receive(&d, &header, &rx), Err(ProtocolError::Frame(_))));
    }

    #[test]
    fn end_to_end_pairs_modes_on_one_trace() {
        let d = deploy();
        let mut cfg = E2eConfig::new(PromptGrammar.evaluation(3), 0.5, 5.0);
        cfg.channel = ChannelKind::RayleighBlock;
        let run = run_end_to_end(&d, &cfg).unwrap();
        assert_eq!(run.results.len(), 3);
        let seeds: Vec<u64> = run.results.iter().map(|r| r.trace_seed).collect();
        assert!(seeds.iter().all(|&s| s == run.trace.seed));
        assert_eq!(run.trace.len(), 3 * 64);
        for r in &run.results {
            let expected = symbol_count(r.mode, d.gen.image, d.gen.latent_channels, d.gen.downsample, 0.5).unwrap();
            assert_eq!(r.symbols_per_image, expected);
            assert_eq!(r.report.symbols, expected);
        }
        let again = run_end_to_end(&d, &cfg).unwrap();
        for (a, b) in run.results.iter().zip(&again.results) {
            assert_eq!(a.images, b.images);
        }
    }

    #[test]
    fn perfect_channel_gives_infinite_psnr_for_raw_feature() {
        let d = deploy();
        let mut cfg = E2eConfig::new(PromptGrammar.evaluation(2), 0.5, 0.0);
        cfg.perfect_channel = true;
        let run = run_end_to_end(&d, &cfg).unwrap();
        assert_eq!(run.result(Mode::RawFeature).unwrap().report.psnr_db, f64::INFINITY);
        assert!(run.result(Mode::Centralized).unwrap().report.psnr_db > 40.0);
    }

    #[test]
    fn reports_match_external_metrics() {
        let d = deploy();
        let run = run_end_to_end(&d, &E2eConfig::new(PromptGrammar.evaluation(3), 0.5, 10.0)).unwrap();
        let meg = run.result(Mode::Meg).unwrap();
        let f = fid(&meg.images, &run.truth, &d.extractor).unwrap();
        assert_eq!(meg.report.fid_proxy, f);
        let p: f64 = meg.images.iter().zip(&run.truth).map(|(g, t)| image_psnr(g, t).unwrap()).sum::<f64>() / 3.0;
        assert_eq!(meg.report.psnr_db, p);
    }

    #[test]
    fn codec_selection_prefers_matching_snr() {
        let mut d = deploy();
        let mut low = d.codecs[0].clone();
        low.trained_snr_db = -10.0;
        d.codecs[0].trained_snr_db = 20.0;
        d.codecs.push(low);
        assert_eq!(d.codec_for(0.5, Some(-8.0)).unwrap().trained_snr_db, -10.0);
        assert_eq!(d.codec_for(0.5, Some(15.0)).unwrap().trained_snr_db, 20.0);
        assert_eq!(d.codec_for(0.5, None).unwrap().trained_snr_db, 20.0);
        assert!(d.codec_for(0.9, None).is_err());
    }
}
