//! End-to-end tests of the `eploop` binary: shipped configs, exit codes,
//! machine-readable errors, overrides and manifest round-trips.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eploop"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

fn stderr_error(output: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&output.stderr);
    let line = text
        .lines()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON error on stderr: {text}"));
    serde_json::from_str(line).expect("stderr carries valid JSON")
}

#[test]
fn spectrum_on_shipped_canonical_config() {
    let dir = tempdir().unwrap();
    let out = bin()
        .args(["spectrum", "--config"])
        .arg(config("fig1_braid_ep2.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("signature (1 2)"), "stdout: {stdout}");
    let sig = std::fs::read_to_string(dir.path().join("signature.txt")).unwrap();
    assert_eq!(sig.trim(), "(1 2)");
    assert!(dir.path().join("track.csv").exists());
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("braid.gp").exists());
}

#[test]
fn evolve_zero_radius_loop_matches_closed_form_decay() {
    let dir = tempdir().unwrap();
    let out = bin()
        .args(["evolve", "--config"])
        .arg(config("pure_decay.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("evolve_vector.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let fields: Vec<f64> = last.split(',').map(|x| x.parse().unwrap()).collect();
    // header: t, log_norm, then 7 columns per state starting with Re_a, Im_a
    let (t, ln) = (fields[0], fields[1]);
    assert!((t - 10.0).abs() < 1e-12);
    let a1 = (fields[2].powi(2) + fields[3].powi(2)).sqrt() * ln.exp();
    let a2 = (fields[9].powi(2) + fields[10].powi(2)).sqrt() * ln.exp();
    // E = (-0.1i, -0.01i) over T = 10: moduli e^-1 and e^-0.1
    assert!((a1 - (-1.0_f64).exp()).abs() < 1e-9, "got {a1}");
    assert!((a2 - (-0.1_f64).exp()).abs() < 1e-9, "got {a2}");
}

#[test]
fn detect_finds_canonical_ep() {
    let dir = tempdir().unwrap();
    let out = bin()
        .args(["detect", "--config"])
        .arg(config("detect_canonical.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("detected_eps.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "p1,p2,order");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let p1: f64 = row[0].parse().unwrap();
    let p2: f64 = row[1].parse().unwrap();
    assert!(p1.abs() < 1e-6 && (p2 - 1.0).abs() < 1e-6);
    assert_eq!(row[2], "2");
}

#[test]
fn validate_passes_on_shipped_config() {
    let out = bin()
        .args(["validate", "--config"])
        .arg(config("validate_canonical.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 5);
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn schema_violation_exits_2_with_json_error() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"family":{"builtin":"canonical_ep2"},"loop":{"shape":{"kind":"circle","center":{"p1":0.0,"p2":1.0},"radius":0.1,"mode":"absolute"},"traversal_time":1.0},"not_a_key":true}"#,
    )
    .unwrap();
    let out = bin()
        .args(["spectrum", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_error(&out);
    assert_eq!(err["error"]["code"], 2);
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn on_ep_frame_exits_3() {
    // shrink the loop to a point sitting exactly on the EP
    let dir = tempdir().unwrap();
    let out = bin()
        .args(["spectrum", "--config"])
        .arg(config("fig1_braid_ep2.json"))
        .args(["--set", "loop.shape.radius=0.0", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_error(&out);
    assert_eq!(err["error"]["kind"], "on-ep-frame");
    assert!(!dir.path().join("track.csv").exists());
}

#[test]
fn tracked_subset_braiding_out_exits_4() {
    // following only one of the two exchanging states cannot close
    let dir = tempdir().unwrap();
    let out = bin()
        .args(["spectrum", "--config"])
        .arg(config("fig1_braid_ep2.json"))
        .args(["--set", "tracked=[0]", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let err = stderr_error(&out);
    assert_eq!(err["error"]["kind"], "refinement-failure");
}

#[test]
fn set_overrides_reach_the_manifest() {
    let dir = tempdir().unwrap();
    let out = bin()
        .args(["spectrum", "--config"])
        .arg(config("fig1_braid_ep2.json"))
        .args(["--set", "loop.n_steps=64", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["loop"]["n_steps"], 64);
    let track = std::fs::read_to_string(dir.path().join("track.csv")).unwrap();
    assert_eq!(track.lines().count(), 1 + 65);
}

#[test]
fn manifest_embedded_config_reproduces_the_run() {
    let dir1 = tempdir().unwrap();
    let out = bin()
        .args(["evolve", "--config"])
        .arg(config("fig2_flip_two_state.json"))
        .args(["--set", "dynamics.n_samples=40", "--out"])
        .arg(dir1.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // extract the embedded config and run it again
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir1.path().join("manifest.json")).unwrap())
            .unwrap();
    let dir2 = tempdir().unwrap();
    let replay_cfg = dir2.path().join("replay.json");
    std::fs::write(&replay_cfg, manifest["config"].to_string()).unwrap();
    let out = bin()
        .args(["evolve", "--config"])
        .arg(&replay_cfg)
        .arg("--out")
        .arg(dir2.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    for name in ["evolve_basis0.csv", "evolve_basis1.csv"] {
        let a = std::fs::read(dir1.path().join(name)).unwrap();
        let b = std::fs::read(dir2.path().join(name)).unwrap();
        assert_eq!(a, b, "replayed {name} differs");
    }
}

#[test]
fn threads_flag_keeps_output_deterministic() {
    let dir1 = tempdir().unwrap();
    let dir2 = tempdir().unwrap();
    for (dir, threads) in [(&dir1, "1"), (&dir2, "4")] {
        let out = bin()
            .args(["scan", "--config"])
            .arg(config("fig5_shift_scan.json"))
            .args([
                "--threads",
                threads,
                "--set",
                "scan.n_s=5",
                "--set",
                "dynamics.n_samples=30",
                "--out",
            ])
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir1.path().join("scan_finals.csv")).unwrap();
    let b = std::fs::read(dir2.path().join("scan_finals.csv")).unwrap();
    assert_eq!(a, b, "thread count must not affect the output bytes");
}

#[test]
fn log_env_var_controls_diagnostics() {
    let dir = tempdir().unwrap();
    let out = bin()
        .args(["spectrum", "--config"])
        .arg(config("fig1_braid_ep2.json"))
        .args(["--set", "loop.n_steps=32", "--out"])
        .arg(dir.path())
        .env("EPLOOP_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("running spectrum"), "stderr: {stderr}");
}
