use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ilflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilflow"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = r#"{
    "seed": 3,
    "horizon": 20,
    "expert_steps": 600,
    "dataset": {"n_expert": 6, "subset": 4, "n_noisy": 8, "n_random": 5},
    "flow": {"hidden": [16, 16], "context_hidden": 8},
    "flow_train": {"epochs": 3, "batch_size": 32},
    "sac": {
        "actor_hidden": [16, 16],
        "critic_hidden": [16, 16],
        "batch_size": 32,
        "warmup_steps": 100,
        "eval_interval": 200,
        "eval_episodes": 2,
        "total_steps": 400
    },
    "calibration": {"sweep_samples": 200, "sweep_bins": 5},
    "run_id": "tiny"
}"#;

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ilflow(dir.path(), &["fly"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));

    let out = ilflow(dir.path(), &["verify", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));

    let out = ilflow(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), r#"{"sac": {"alpha": -1}}"#).unwrap();
    let out = ilflow(dir.path(), &["--config", "run.json", "verify"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sac.alpha"), "{}", stderr(&out));
}

#[test]
fn train_il_without_flow_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"dataset": {"n_expert": 10, "subset": 10}, "run_id": "r"}"#,
    )
    .unwrap();
    let out = ilflow(dir.path(), &["--config", "run.json", "train-il"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("flow") && err.contains("train-flow"), "{err}");
}

#[test]
fn verify_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ilflow(dir.path(), &["--output-dir", "out", "--run-id", "v", "verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/v/reports/verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], Value::Bool(true));
    assert_eq!(report["checks"].as_array().unwrap().len(), 4);
}

fn run_pipeline(dir: &Path) -> Value {
    std::fs::write(dir.join("run.json"), TINY).unwrap();
    let stages: [&[&str]; 8] = [
        &["train-expert"],
        &["collect", "--kind", "expert"],
        &["collect", "--kind", "noisy_expert", "--n", "8"],
        &["train-flow"],
        &["train-il"],
        &["eval"],
        &["calibrate"],
        &["sample-flow", "--state", "-0.5,0.25", "--h", "1.5", "--n", "50"],
    ];
    for stage in stages {
        let mut args = vec!["--config", "run.json", "--quiet"];
        args.extend_from_slice(stage);
        let out = ilflow(dir, &args);
        assert_eq!(out.status.code(), Some(0), "{stage:?}: {}", stderr(&out));
    }
    serde_json::from_slice(&std::fs::read(dir.join("runs/tiny/manifest.json")).unwrap()).unwrap()
}

#[test]
fn full_pipeline_is_hashed_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let manifest = run_pipeline(a.path());
    let root = a.path().join("runs/tiny");

    let files = manifest["files"].as_object().unwrap();
    for expected in [
        "checkpoints/expert.ckpt",
        "checkpoints/flow.ckpt",
        "checkpoints/imitation.ckpt",
        "datasets/expert.csv",
        "datasets/noisy_expert.csv",
        "datasets/random.csv",
        "logs/expert_curve.csv",
        "logs/imitation_curve.csv",
        "logs/flow_loss.csv",
        "reports/eval.json",
        "reports/calibration/summary.json",
        "reports/samples_h1.5.csv",
    ] {
        assert!(files.contains_key(expected), "{expected} missing from manifest");
    }
    for (rel, entry) in files {
        let bytes = std::fs::read(root.join(rel)).unwrap();
        assert_eq!(entry["bytes"].as_u64().unwrap(), bytes.len() as u64, "{rel}");
        assert_eq!(entry["sha256"].as_str().unwrap().len(), 64);
    }
    assert_eq!(manifest["config"]["seed"], 3);
    assert!(manifest["stages"].as_array().unwrap().len() >= 9);

    let noisy = std::fs::read_to_string(root.join("datasets/noisy_expert.csv")).unwrap();
    let header = noisy.lines().next().unwrap();
    assert!(header.contains("\"l_max\":1.5"), "{header}");

    let samples = std::fs::read_to_string(root.join("reports/samples_h1.5.csv")).unwrap();
    assert_eq!(samples.lines().count(), 51);

    let b = tempfile::tempdir().unwrap();
    let again = run_pipeline(b.path());
    for curve in [
        "logs/expert_curve.csv",
        "logs/imitation_curve.csv",
        "logs/flow_loss.csv",
    ] {
        let strip = |v: &Value| v["files"][curve]["sha256"].clone();
        assert_eq!(
            strip(&manifest),
            strip(&again),
            "{curve} differs between identical runs"
        );
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), r#"{"seed": 1, "run_id": "s"}"#).unwrap();
    let out = ilflow(
        dir.path(),
        &["--config", "run.json", "--seed", "9", "--quiet", "verify"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let m: Value = serde_json::from_slice(&std::fs::read(dir.path().join("runs/s/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["seed"], 9);
    assert_eq!(m["seeds"]["verify"], 9);
}
