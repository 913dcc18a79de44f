//! The installed binary surface: flag spelling, JSON on stdout, exit codes.

use std::path::Path;
use std::process::Command;

fn clipfree() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clipfree"))
}

const CONFIG: &str = r#"
seed = 5

[data]
source = "synthetic-two-gaussians"
preprocess = "clip"
input_bound = 4.0
n_per_class = 40
dim = 4
separation = 6.0

[[model.layers]]
kind = "bounded_input"

[[model.layers]]
kind = "spectral_dense"
units = 2

[loss]
kind = "tau_categorical_crossentropy"
tau = 1.0

[dp]
noise_multiplier = 1.0
delta = 1e-5
strategy = "global"

[optimizer]
learning_rate = 0.1
batch_size = 20
epochs = 2
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path
}

#[test]
fn account_subcommand_prints_json_report() {
    let out = clipfree()
        .args([
            "account",
            "--sigma",
            "1.0",
            "--sampling-prob",
            "1.0",
            "--steps",
            "1",
            "--delta",
            "1e-5",
            "--strategy",
            "global",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let eps = report["epsilon"].as_f64().unwrap();
    assert!((eps - 5.3026).abs() < 1e-3);
    assert_eq!(report["optimal_order"], 6);

    let bad = clipfree()
        .args([
            "account",
            "--sigma",
            "1.0",
            "--sampling-prob",
            "0.5",
            "--steps",
            "1",
            "--delta",
            "1e-5",
            "--strategy",
            "sideways",
        ])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn train_certify_audit_pipeline_through_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("out");

    let train = clipfree()
        .args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data-dir",
            dir.path().to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "7",
        ])
        .output()
        .unwrap();
    assert!(
        train.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&train.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&train.stdout).unwrap();
    assert!(summary["epsilon"].as_f64().unwrap() > 0.0);

    let certify = clipfree()
        .args(["certify", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(certify.status.success());
    let report: serde_json::Value = serde_json::from_slice(&certify.stdout).unwrap();
    assert!(report["global_sensitivity"].as_f64().unwrap() > 0.0);

    let audit = clipfree()
        .args([
            "audit",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            out_dir.join("checkpoint.bin").to_str().unwrap(),
            "--data-dir",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(audit.status.success());
    let verdict: serde_json::Value = serde_json::from_slice(&audit.stdout).unwrap();
    assert_eq!(verdict["pass"], serde_json::Value::Bool(true));

    // A missing checkpoint is a structured failure with non-zero exit.
    let broken = clipfree()
        .args([
            "audit",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            out_dir.join("missing.bin").to_str().unwrap(),
            "--data-dir",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!broken.status.success());
    assert!(String::from_utf8_lossy(&broken.stderr).contains("error"));
}
