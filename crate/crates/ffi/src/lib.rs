//! C ABI over the simulator.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `meg_*_new`/`load`-style function and released with the matching
//! `meg_*_free`. Every fallible call returns a [`MegStatus`]; the message of
//! the last failure on the calling thread is available from
//! [`meg_last_error`]. Panics never unwind into C: they are caught and
//! reported as [`MegStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use meg::channel::{sample_fading_trace, snr_to_noise_std, ChannelError, ChannelKind, ChannelModel};
use meg::experiment::{load_bundle, ExperimentConfig, ExperimentError, Preset};
use meg::metrics::{psnr, MetricError};
use meg::protocol::{es_handle_request, transmit_frame, ue_receive, Deployment, GenerationRequest, ProtocolError, SeedFrame};
use meg::rng::stream_rng;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Protocol = 5,
    Channel = 6,
    Metric = 7,
    /// The caller's buffer is too small; the required size was still written.
    BufferTooSmall = 8,
    Panic = 9,
}

/// `MegChannel` selects the fading model for [`meg_ue_receive`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MegChannel {
    Awgn = 0,
    RayleighBlock = 1,
}

impl From<MegChannel> for ChannelKind {
    fn from(c: MegChannel) -> Self {
        match c {
            MegChannel::Awgn => ChannelKind::Awgn,
            MegChannel::RayleighBlock => ChannelKind::RayleighBlock,
        }
    }
}

/// Opaque experiment configuration.
pub struct MegConfig(ExperimentConfig);

/// Opaque set of trained (or untrained) models.
pub struct MegDeployment(Deployment);

/// Opaque seed frame.
pub struct MegFrame(SeedFrame);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(MegStatus, String);

impl Failure {
    fn arg(msg: impl Into<String>) -> Self {
        Failure(MegStatus::InvalidArgument, msg.into())
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        let status = match &e {
            ProtocolError::Channel(_) => MegStatus::Channel,
            ProtocolError::Metric(_) => MegStatus::Metric,
            ProtocolError::Config(_) => MegStatus::Config,
            _ => MegStatus::Protocol,
        };
        Failure(status, e.to_string())
    }
}

impl From<ChannelError> for Failure {
    fn from(e: ChannelError) -> Self {
        Failure(MegStatus::Channel, e.to_string())
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Failure(MegStatus::Metric, e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let status = match &e {
            ExperimentError::Io(_) | ExperimentError::MissingBundle(_) => MegStatus::Io,
            ExperimentError::Protocol(_) => MegStatus::Protocol,
            ExperimentError::Channel(_) => MegStatus::Channel,
            ExperimentError::Metric(_) => MegStatus::Metric,
            _ => MegStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MegStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (MegStatus::Ok, String::new()),
        Ok(Err(Failure(s, m))) => (s, m),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (MegStatus::Panic, m)
        }
    };
    if status != MegStatus::Ok {
        LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    }
    status
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(MegStatus::NullPointer, format!("{what} is null")))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MegStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::arg(format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(MegStatus::NullPointer, "output pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies `s` plus a NUL into `buf` when it fits. Returns the size needed.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize) -> usize {
    let need = s.len() + 1;
    if !buf.is_null() && cap >= need {
        ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
        *buf.add(s.len()) = 0;
    }
    need
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated) and returns the buffer size it needs. Pass a null `buf` to
/// query the size.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn meg_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| write_str(&e.borrow(), buf, cap))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn meg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Built-in preset by name: `"desk"` or `"paper-arithmetic"`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn meg_config_preset(name: *const c_char, out: *mut *mut MegConfig) -> MegStatus {
    guard(|| {
        let preset: Preset = text(name, "name")?.parse()?;
        put(out, MegConfig(ExperimentConfig::preset(preset)))
    })
}

/// Parses and validates a TOML config.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn meg_config_from_toml(toml: *const c_char, out: *mut *mut MegConfig) -> MegStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_toml(text(toml, "toml")?)?;
        cfg.validate()?;
        put(out, MegConfig(cfg))
    })
}

/// Writes the 16-hex-digit config hash. `needed` (optional) receives the
/// buffer size required, 17.
///
/// # Safety
/// `cfg` must come from this library; `buf` must be valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn meg_config_hash(
    cfg: *const MegConfig,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> MegStatus {
    guard(|| {
        let need = write_str(&borrow(cfg, "cfg")?.0.hash(), buf, cap);
        if !needed.is_null() {
            *needed = need;
        }
        if buf.is_null() || cap < need {
            return Err(Failure(MegStatus::BufferTooSmall, format!("hash needs {need} bytes")));
        }
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn meg_config_free(cfg: *mut MegConfig) {
    free(cfg)
}

/// Loads a trained bundle (`meg train` output) and checks it against `cfg`.
///
/// # Safety
/// `cfg` must come from this library; `dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn meg_deployment_load(
    cfg: *const MegConfig,
    dir: *const c_char,
    out: *mut *mut MegDeployment,
) -> MegStatus {
    guard(|| {
        let deploy = load_bundle(&borrow(cfg, "cfg")?.0, Path::new(text(dir, "dir")?))?;
        put(out, MegDeployment(deploy))
    })
}

/// Randomly initialized models for the config's architecture and rates.
///
/// # Safety
/// `cfg` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn meg_deployment_untrained(
    cfg: *const MegConfig,
    seed: u64,
    out: *mut *mut MegDeployment,
) -> MegStatus {
    guard(|| {
        let cfg = &borrow(cfg, "cfg")?.0;
        put(out, MegDeployment(Deployment::untrained(cfg.model.clone(), &cfg.codec.rates, seed)?))
    })
}

/// Number of `f32` values in one generated image.
///
/// # Safety
/// `deploy` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn meg_deployment_image_len(deploy: *const MegDeployment) -> usize {
    deploy.as_ref().map_or(0, |d| d.0.gen.image.len())
}

/// # Safety
/// `deploy` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn meg_deployment_free(deploy: *mut MegDeployment) {
    free(deploy)
}

/// Edge-server side: samples the latent for `prompt` and compresses it into a
/// seed frame. `link_snr_db` picks the codec trained nearest to it; pass NaN
/// when the link quality is unknown.
///
/// # Safety
/// Pointers must come from this library or be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn meg_es_generate(
    deploy: *const MegDeployment,
    prompt: *const c_char,
    f_c: f64,
    noise_seed: u64,
    block_length: usize,
    link_snr_db: f64,
    out: *mut *mut MegFrame,
) -> MegStatus {
    guard(|| {
        let deploy = &borrow(deploy, "deploy")?.0;
        if block_length == 0 {
            return Err(Failure::arg("block_length must be positive"));
        }
        let request = GenerationRequest {
            prompt: text(prompt, "prompt")?.to_owned(),
            f_c,
            image: deploy.gen.image,
            noise_seed,
            link_snr_db: (!link_snr_db.is_nan()).then_some(link_snr_db),
        };
        put(out, MegFrame(es_handle_request(deploy, &request, block_length)?.frame))
    })
}

/// User-equipment side: sends `frame` over the channel with unit power per
/// block and decodes the received seed into `image` (values in [0, 1]).
/// An infinite `snr_db` bypasses the channel.
///
/// # Safety
/// `image` must be valid for `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn meg_ue_receive(
    deploy: *const MegDeployment,
    frame: *const MegFrame,
    channel: MegChannel,
    snr_db: f64,
    channel_seed: u64,
    image: *mut f32,
    cap: usize,
) -> MegStatus {
    guard(|| {
        let deploy = &borrow(deploy, "deploy")?.0;
        let frame = &borrow(frame, "frame")?.0;
        if snr_db.is_nan() {
            return Err(Failure::arg("snr_db is NaN"));
        }
        let need = deploy.gen.image.len();
        if image.is_null() || cap < need {
            return Err(Failure(MegStatus::BufferTooSmall, format!("image needs {need} floats")));
        }
        let perfect = snr_db == f64::INFINITY;
        let model = ChannelModel::new(channel.into(), frame.block_length.max(1) as usize, snr_to_noise_std(snr_db, 1.0))?;
        let blocks = model.blocks_for(frame.payload.len());
        let trace = sample_fading_trace(&model, blocks, channel_seed);
        let mut rng = stream_rng(channel_seed, 1);
        let rx = transmit_frame(frame, &trace.gains, &vec![1.0; blocks], model.noise_std, &mut rng, perfect)?;
        let ue = ue_receive(deploy, &frame.header_bytes(), &rx)?;
        ptr::copy_nonoverlapping(ue.image.values.as_ptr(), image, need);
        Ok(())
    })
}

/// Parses a wire-format frame.
///
/// # Safety
/// `bytes` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn meg_frame_decode(bytes: *const u8, len: usize, out: *mut *mut MegFrame) -> MegStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(Failure(MegStatus::NullPointer, "bytes is null".into()));
        }
        put(out, MegFrame(SeedFrame::decode(std::slice::from_raw_parts(bytes, len))?))
    })
}

/// Serializes `frame`. `written` receives the encoded size even when the
/// buffer is too small, so a null `buf` queries the size.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn meg_frame_encode(
    frame: *const MegFrame,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> MegStatus {
    guard(|| {
        let bytes = borrow(frame, "frame")?.0.encode();
        if written.is_null() {
            return Err(Failure(MegStatus::NullPointer, "written is null".into()));
        }
        *written = bytes.len();
        if buf.is_null() || cap < bytes.len() {
            return Err(Failure(MegStatus::BufferTooSmall, format!("frame needs {} bytes", bytes.len())));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        Ok(())
    })
}

/// Number of seed symbols carried by the frame.
///
/// # Safety
/// `frame` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn meg_frame_symbols(frame: *const MegFrame) -> usize {
    frame.as_ref().map_or(0, |f| f.0.payload.len())
}

/// Compression rate recorded in the header; NaN for a null frame.
///
/// # Safety
/// `frame` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn meg_frame_f_c(frame: *const MegFrame) -> f64 {
    frame.as_ref().map_or(f64::NAN, |f| f.0.f_c())
}

/// # Safety
/// `frame` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn meg_frame_free(frame: *mut MegFrame) {
    free(frame)
}

/// PSNR in dB between two equal-length signals with peak `i_max`.
/// Identical inputs give +infinity.
///
/// # Safety
/// `a` and `b` must be valid for `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn meg_psnr(a: *const f64, b: *const f64, len: usize, i_max: f64, out: *mut f64) -> MegStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(Failure(MegStatus::NullPointer, "null argument".into()));
        }
        let a = std::slice::from_raw_parts(a, len);
        let b = std::slice::from_raw_parts(b, len);
        *out = psnr(a, b, i_max)?;
        Ok(())
    })
}
