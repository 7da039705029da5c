//! Builds `smoke.c` against the generated header and the static library.

use std::path::{Path, PathBuf};
use std::process::Command;

fn target_dir() -> PathBuf {
    // .../target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().expect("test binary path");
    exe.parent().and_then(Path::parent).expect("profile directory").to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let here = Path::new(env!("CARGO_MANIFEST_DIR"));
    // `cargo test` leaves the archive in deps/; `cargo build` also copies it up
    let profile = target_dir();
    let lib = [profile.join("deps/libmeg_ffi.a"), profile.join("libmeg_ffi.a")]
        .into_iter()
        .find(|p| p.exists())
        .unwrap_or_else(|| panic!("libmeg_ffi.a not found under {}", profile.display()));
    let exe = Path::new(env!("CARGO_TARGET_TMPDIR")).join("meg_smoke");
    let status = Command::new("cc")
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(here.join("include"))
        .arg(here.join("tests/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler named cc");
    assert!(status.success(), "compiling smoke.c failed");
    let out = Command::new(&exe).output().expect("run smoke test");
    assert!(out.status.success(), "smoke test exited with {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
