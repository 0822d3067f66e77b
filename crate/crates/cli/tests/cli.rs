use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn diveq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diveq")).args(args).output().unwrap()
}

const TINY: &str = r#"{
  "kind": "RD_SWEEP",
  "dataset": {"size": 200, "seed": 3},
  "quantizer": {"method": "DIVEQ"},
  "schedule": {"batch_size": 32, "learning_rate": 0.05, "lr_milestones": [], "iterations": 15},
  "bitrates": [1, 2],
  "seeds": [0, 1],
  "snapshot_rows": 20
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = diveq(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = diveq(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--workers", "3"]);
    assert!(out.status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    let runs: Vec<_> = fs::read_dir(a.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 4);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rate_distortion"][0]["table"]["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn seed_override_runs_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("o");
    let out = diveq(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--seed-override", "9"]);
    assert!(out.status.success());
    let mut names: Vec<String> = fs::read_dir(out_dir.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["DIVEQ_b1_s9", "DIVEQ_b2_s9"]);
}

#[test]
fn validate_reports_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"quantizer": {"sigma2": -1.0}}"#);
    let out = diveq(&["validate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report[0]["path"], "quantizer.sigma2");

    let cfg = write_config(dir.path(), "{}");
    let out = diveq(&["validate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap(), serde_json::json!([]));
}

#[test]
fn validate_warns_for_space_filling_with_replacement() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"quantizer": {"method": "SF_DIVEQ"}, "replacement": {}}"#);
    let out = diveq(&["validate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report[0]["severity"], "warning");
}

#[test]
fn exit_codes_by_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(diveq(&["run", "--config", missing.to_str().unwrap(), "--out", "x"]).status.code(), Some(4));

    let cfg = write_config(dir.path(), r#"{"kind": "NOT_A_KIND"}"#);
    assert_eq!(diveq(&["run", "--config", &cfg, "--out", "x"]).status.code(), Some(2));

    // learning rate large enough to overflow the tape
    let diverging = r#"{
      "dataset": {"size": 50},
      "quantizer": {"method": "STE"},
      "schedule": {"optimizer": "SGD", "learning_rate": 1e200, "lr_milestones": [], "iterations": 5, "batch_size": 50},
      "bitrates": [1]
    }"#;
    let cfg = write_config(dir.path(), diverging);
    let out_dir = dir.path().join("d");
    let out = diveq(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn export_snapshot_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("r");
    assert!(diveq(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]).status.success());
    let ckpt = out_dir.join("runs/DIVEQ_b2_s0/codebook.bin");
    let snap = dir.path().join("snap.bin");
    let out = diveq(&["export-snapshot", "--checkpoint", ckpt.to_str().unwrap(), "--out", snap.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (rows, roles) = diveq::metrics::load_alignment_snapshot(&snap).unwrap();
    assert_eq!(rows.rows(), 4);
    assert!(roles.iter().all(|&r| r == diveq::metrics::ROLE_CODEWORD));

    let bad = dir.path().join("garbage.bin");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = diveq(&["export-snapshot", "--checkpoint", bad.to_str().unwrap(), "--out", snap.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}
