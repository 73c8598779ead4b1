use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "name": "tiny",
  "demos": { "trajectories": 2 },
  "gp": { "epochs": 50 },
  "clone": { "hidden": [16], "epochs": 20 },
  "ensemble": { "members": 3 },
  "dropout": { "masks": 3 },
  "train": {
    "total_steps": 600, "hidden": [16, 16], "batch_size": 32,
    "pretrain_epochs": 10, "pretrain_batch_size": 32,
    "eval_interval": 200, "eval_episodes": 2
  },
  "grid": { "axes": [0, 1], "min": [-1, -1], "max": [1, 1], "resolution": [7, 5], "fixed": [0, 0, 0, 0] },
  "eval": { "episodes": 3 }
}"#;

fn klprior(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klprior"))
        .args(["--config", dir.join("cfg.json").to_str().unwrap(), "--outdir", dir.join("out").to_str().unwrap()])
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), config).unwrap();
    dir
}

#[test]
fn pipeline_writes_declared_artifacts() {
    let dir = setup(TINY);
    let run = dir.path().join("out/tiny-s3");
    ok(klprior(dir.path(), &["--seed", "3", "demo-gen"]));
    assert!(run.join("demos.csv").exists());
    ok(klprior(dir.path(), &["--seed", "3", "clone", "--variant", "gp"]));
    assert!(run.join("reference.json").exists());
    ok(klprior(dir.path(), &["--seed", "3", "heatmap"]));
    let grid = std::fs::read_to_string(run.join("heatmap.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|l| l.split(',').count() == 6));
    ok(klprior(dir.path(), &["--seed", "3", "train"]));
    for f in ["metrics.csv", "pretrain.csv", "policy.json", "summary.json", "checkpoints/end.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    ok(klprior(dir.path(), &["--seed", "3", "eval"]));
    let ev: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(ev["episodes"], 3);
    let effective = std::fs::read_to_string(run.join("config.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&effective).unwrap();
    assert_eq!(parsed["seeds"], serde_json::json!([3]));
    assert_eq!(parsed["train"]["seed"], 3);
    assert_eq!(parsed["train"]["gamma"], 0.99);
}

#[test]
fn train_twice_is_byte_identical() {
    let dir = setup(TINY);
    ok(klprior(dir.path(), &["--seed", "7", "demo-gen"]));
    ok(klprior(dir.path(), &["--seed", "7", "clone"]));
    let metrics = dir.path().join("out/tiny-s7/metrics.csv");
    ok(klprior(dir.path(), &["--seed", "7", "train"]));
    let first = std::fs::read(&metrics).unwrap();
    ok(klprior(dir.path(), &["--seed", "7", "train"]));
    assert_eq!(first, std::fs::read(&metrics).unwrap());
}

#[test]
fn ablation_writes_three_runs_and_manifest() {
    let dir = setup(TINY);
    ok(klprior(dir.path(), &["demo-gen"]));
    ok(klprior(dir.path(), &["clone"]));
    ok(klprior(dir.path(), &["ablation"]));
    let abl = dir.path().join("out/tiny-s0/ablation");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(abl.join("manifest.json")).unwrap()).unwrap();
    let runs = manifest["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for r in runs {
        assert!(abl.join(r["metrics"].as_str().unwrap()).exists());
    }
}

#[test]
fn every_reference_variant_clones() {
    let dir = setup(TINY);
    ok(klprior(dir.path(), &["demo-gen"]));
    for v in ["mle-gaussian", "mle-entropy", "mle-tikhonov", "ensemble", "mc-dropout", "laplace", "constant-variance"] {
        ok(klprior(dir.path(), &["clone", "--variant", v]));
        let text = std::fs::read_to_string(dir.path().join("out/tiny-s0/reference.json")).unwrap();
        assert!(text.contains("\"variant\""), "{v}");
    }
}

#[test]
fn seed_list_fans_out() {
    let dir = setup(TINY);
    ok(klprior(dir.path(), &["--seed", "1,2", "demo-gen"]));
    assert!(dir.path().join("out/tiny-s1/demos.csv").exists());
    assert!(dir.path().join("out/tiny-s2/demos.csv").exists());
}

#[test]
fn config_errors_are_json_with_key() {
    let dir = setup(r#"{"train": {"gamma": -1.0}}"#);
    let out = klprior(dir.path(), &["train"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["key"].as_str().unwrap().contains("gamma"));

    let dir = setup(r#"{"trian": {}}"#);
    let out = klprior(dir.path(), &["train"]);
    let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["key"], "trian");
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = setup(TINY);
    let out = klprior(dir.path(), &["clone"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "missing-input");
}
