//! Drives the `meg` binary end to end on a tiny config.

use std::path::Path;
use std::process::{Command, Output};

mod common;

fn meg(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_meg"));
    cmd.env_remove("MEG_CONFIG").env_remove("MEG_SEED").env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--out").arg(out).args(args).output().expect("meg runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn table_reproduces_published_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let o = meg(&["--preset", "paper-arithmetic", "table"], None, dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    for n in ["1,048,576", "16,384", "1,638", "4,915", "8,192", "11,469", "14,746", "563,430,184"] {
        assert!(text.contains(n), "missing {n} in\n{text}");
    }
}

#[test]
fn sweep_without_bundle_explains_what_to_do() {
    let dir = tempfile::tempdir().unwrap();
    let o = meg(&["sweep"], None, dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("meg train"));
}

#[test]
fn train_sweep_power_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, common::tiny().canonical()).unwrap();
    let out = dir.path().join("out");
    let cfg = Some(cfg_path.as_path());

    let o = meg(&["config"], cfg, &out);
    assert!(stdout(&o).contains(&common::tiny().hash()));

    let o = meg(&["train"], cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = meg(&["train"], cfg, &out);
    assert!(stdout(&o).lines().filter(|l| l.contains("cached")).count() == 6, "{}", stdout(&o));

    let o = meg(&["sweep"], cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("mode,f_c,snr_db,trial,psnr_db,fid_proxy"));
    assert!(out.join("plots/fid_vs_snr_fc0.5.svg").exists());
    assert!(out.join("plots/fid_vs_snr_fc0.5.csv").exists());

    let o = meg(&["power"], cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("0 violations"));
    let power = std::fs::read_to_string(out.join("power.csv")).unwrap();
    assert!(power.starts_with("p_max,uniform_fid,drl_fid"));

    let traces = out.join("power/eval_traces.csv");
    let agent = out.join("power/agent_pmax1.megn");
    let o = meg(&["eval", "--traces", traces.to_str().unwrap(), "--p-max", "1"], cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let uniform = stdout(&o);
    let o = meg(
        &["eval", "--traces", traces.to_str().unwrap(), "--p-max", "1", "--agent", agent.to_str().unwrap()],
        cfg,
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(uniform.contains("n 6") && stdout(&o).contains("budget violations 0"));

    // rerunning the sweep reproduces the file byte for byte
    meg(&["sweep"], cfg, &out);
    assert_eq!(std::fs::read_to_string(out.join("sweep.csv")).unwrap(), csv);
}
