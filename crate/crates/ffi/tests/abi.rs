use std::ffi::{CStr, CString};
use std::ptr;

use meg_ffi::*;

fn last_error() -> String {
    let need = unsafe { meg_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0 as std::ffi::c_char; need];
    unsafe { meg_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn desk() -> *mut MegConfig {
    let name = CString::new("desk").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { meg_config_preset(name.as_ptr(), &mut cfg) }, MegStatus::Ok);
    cfg
}

#[test]
fn config_hash_through_the_abi() {
    let cfg = desk();
    let mut needed = 0usize;
    let mut small = [0 as std::ffi::c_char; 4];
    let st = unsafe { meg_config_hash(cfg, small.as_mut_ptr(), small.len(), &mut needed) };
    assert_eq!(st, MegStatus::BufferTooSmall);
    assert_eq!(needed, 17);
    let mut buf = vec![0 as std::ffi::c_char; needed];
    assert_eq!(unsafe { meg_config_hash(cfg, buf.as_mut_ptr(), buf.len(), &mut needed) }, MegStatus::Ok);
    let hash = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_owned();
    let expected = meg::experiment::ExperimentConfig::preset(meg::experiment::Preset::Desk).hash();
    assert_eq!(hash, expected);
    unsafe { meg_config_free(cfg) };
}

#[test]
fn errors_carry_a_status_and_message() {
    let mut cfg = ptr::null_mut();
    let bad = CString::new("huge").unwrap();
    assert_eq!(unsafe { meg_config_preset(bad.as_ptr(), &mut cfg) }, MegStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("huge"));

    let toml = CString::new("preset = \"desk\"\nseed = 1\nbogus = 2\n").unwrap();
    assert_eq!(unsafe { meg_config_from_toml(toml.as_ptr(), &mut cfg) }, MegStatus::Config);
    assert_eq!(unsafe { meg_config_preset(ptr::null(), &mut cfg) }, MegStatus::NullPointer);

    let cfg = desk();
    let dir = CString::new("/nonexistent/bundle").unwrap();
    let mut dep = ptr::null_mut();
    assert_eq!(unsafe { meg_deployment_load(cfg, dir.as_ptr(), &mut dep) }, MegStatus::Io);
    assert!(last_error().contains("meg train"));
    unsafe { meg_config_free(cfg) };

    let garbage = [0u8; 10];
    let mut frame = ptr::null_mut();
    assert_eq!(unsafe { meg_frame_decode(garbage.as_ptr(), garbage.len(), &mut frame) }, MegStatus::Protocol);

    // freeing null is a no-op
    unsafe {
        meg_config_free(ptr::null_mut());
        meg_deployment_free(ptr::null_mut());
        meg_frame_free(ptr::null_mut());
    }
}

#[test]
fn generate_encode_decode_receive() {
    let cfg = desk();
    let mut dep = ptr::null_mut();
    assert_eq!(unsafe { meg_deployment_untrained(cfg, 11, &mut dep) }, MegStatus::Ok);
    let prompt = CString::new(meg::genmodel::PromptGrammar.evaluation(1).remove(0)).unwrap();
    let mut frame = ptr::null_mut();
    let st = unsafe { meg_es_generate(dep, prompt.as_ptr(), 0.5, 3, 16, f64::NAN, &mut frame) };
    assert_eq!(st, MegStatus::Ok, "{}", last_error());
    assert!((unsafe { meg_frame_f_c(frame) } - 0.5).abs() < 1e-4);
    let symbols = unsafe { meg_frame_symbols(frame) };
    assert!(symbols > 0);

    let mut written = 0usize;
    assert_eq!(unsafe { meg_frame_encode(frame, ptr::null_mut(), 0, &mut written) }, MegStatus::BufferTooSmall);
    assert_eq!(written, 30 + 4 * symbols);
    let mut bytes = vec![0u8; written];
    assert_eq!(unsafe { meg_frame_encode(frame, bytes.as_mut_ptr(), bytes.len(), &mut written) }, MegStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { meg_frame_decode(bytes.as_ptr(), bytes.len(), &mut back) }, MegStatus::Ok);
    let mut again = vec![0u8; written];
    unsafe { meg_frame_encode(back, again.as_mut_ptr(), again.len(), &mut written) };
    assert_eq!(bytes, again);

    let n = unsafe { meg_deployment_image_len(dep) };
    let mut clean = vec![0f32; n];
    let mut noisy = vec![0f32; n];
    let recv = |f, snr, out: &mut [f32]| unsafe {
        meg_ue_receive(dep, f, MegChannel::RayleighBlock, snr, 5, out.as_mut_ptr(), out.len())
    };
    assert_eq!(recv(frame, f64::INFINITY, &mut clean), MegStatus::Ok);
    assert_eq!(recv(back, -10.0, &mut noisy), MegStatus::Ok);
    assert!(clean.iter().chain(&noisy).all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(clean, noisy);
    assert_eq!(recv(frame, f64::NAN, &mut noisy), MegStatus::InvalidArgument);
    assert_eq!(recv(frame, 0.0, &mut noisy[..n - 1]), MegStatus::BufferTooSmall);

    unsafe {
        meg_frame_free(frame);
        meg_frame_free(back);
        meg_deployment_free(dep);
        meg_config_free(cfg);
    }
}

#[test]
fn psnr_over_the_abi() {
    let a = [0.0f64; 8];
    let b = [255.0f64; 8];
    let mut out = f64::NAN;
    assert_eq!(unsafe { meg_psnr(a.as_ptr(), b.as_ptr(), 8, 255.0, &mut out) }, MegStatus::Ok);
    assert_eq!(out, 0.0);
    assert_eq!(unsafe { meg_psnr(a.as_ptr(), a.as_ptr(), 8, 255.0, &mut out) }, MegStatus::Ok);
    assert_eq!(out, f64::INFINITY);
    assert_eq!(unsafe { meg_psnr(a.as_ptr(), b.as_ptr(), 8, -1.0, &mut out) }, MegStatus::Metric);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(meg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
