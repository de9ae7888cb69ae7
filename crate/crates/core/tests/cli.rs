//! End-to-end runs of the `tdhfc` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn tdhfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdhfc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn h2_campaign() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("campaigns/h2.json")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A short H2 campaign that converges within a few iterations.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    std::fs::write(
        &path,
        r#"{
            "system_file": "h2_sto3g.json",
            "p0": [0.0, 1.0],
            "pt": [1.0, 0.0],
            "dt": 8.268e-3,
            "K": 100,
            "rho": 1e4,
            "net": { "layer_sizes": [4, 4, 4, 1], "output_activation": "identity" },
            "opt": { "max_iters": 15, "n_restarts": 2, "mae_tol": 0.5 }
        }"#,
    )
    .unwrap();
    path
}

#[test]
fn gradcheck_passes_on_h2() {
    let cfg = h2_campaign();
    let out = tdhfc(&["gradcheck", "--config", cfg.to_str().unwrap(), "--steps", "50"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS"));
}

#[test]
fn gradcheck_detects_flipped_coupling_sign() {
    let cfg = h2_campaign();
    let out = tdhfc(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "50",
        "--corrupt-zeta-sign",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn gradcheck_rejects_bad_step() {
    let cfg = h2_campaign();
    let out = tdhfc(&["gradcheck", "--config", cfg.to_str().unwrap(), "--fd-step", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn propagate_zero_field_writes_trajectory() {
    let dir = TempDir::new().unwrap();
    let cfg = h2_campaign();
    let out = tdhfc(&[
        "propagate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let mut reader = csv::Reader::from_path(dir.path().join("traj.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header.len(), 2 + 2 * 4 + 1);
    assert_eq!(header[0], "k");
    assert_eq!(header.last().unwrap(), "a_z");
    let rows = reader.records().count();
    assert_eq!(rows, 701);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_steps"], 700);
    assert!(summary["invariants"]["max_trace_error"].as_f64().unwrap() < 1e-10);
    // With no field the state stays in the ground state, far from the target.
    assert!(summary["fidelity"].as_f64().unwrap() < 1e-6);
}

#[test]
fn optimize_then_replay_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = tdhfc(&[
        "--jobs",
        "2",
        "optimize",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["ledger.json", "best_theta.json", "traj.csv", "control.csv", "report.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let beta = report["beta"].as_f64().unwrap();

    let replay_dir = dir.path().join("replay");
    let out = tdhfc(&[
        "propagate",
        "--config",
        cfg.to_str().unwrap(),
        "--theta",
        out_dir.join("best_theta.json").to_str().unwrap(),
        "--out",
        replay_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(replay_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["terminal_mae"].as_f64().unwrap(), beta);

    // Rerunning with the ledger in place skips every finished seed.
    let again = tdhfc(&[
        "optimize",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(again.status.code(), Some(0));
    let report2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report2["beta"].as_f64().unwrap(), beta);
}

#[test]
fn missing_theta_file_is_a_config_error() {
    let cfg = h2_campaign();
    let out = tdhfc(&["propagate", "--config", cfg.to_str().unwrap(), "--theta", "/nonexistent/theta.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_is_rejected() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{ "system_file": "h2_sto3g.json", "unknown_key": 1 }"#).unwrap();
    let out = tdhfc(&["propagate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_fails() {
    let out = tdhfc(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
