use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn finn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_finn"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("FINN_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = finn(out, args);
    assert!(
        o.status.success(),
        "finn {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn json(path: impl AsRef<Path>) -> Value {
    let path = path.as_ref();
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn artifact_hash(manifest: &Value, path: &str) -> String {
    manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .find(|a| a["path"] == path)
        .unwrap_or_else(|| panic!("no artifact {path}"))["content_hash"]
        .as_str()
        .unwrap()
        .to_string()
}

fn input_hash(manifest: &Value, role: &str) -> String {
    manifest["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|i| i[0] == role)
        .unwrap_or_else(|| panic!("no input {role}"))[1]
        .as_str()
        .unwrap()
        .to_string()
}

fn entries(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn generate_writes_the_registered_allen_cahn_training_split() {
    let out = tempfile::tempdir().unwrap();
    ok(out.path(), &["generate", "--family", "allen_cahn", "--split", "train"]);
    let dir = out.path().join("allen_cahn/train");
    let meta = json(dir.join("meta.json"));
    assert_eq!(meta["dims"], serde_json::json!([201, 1, 49]));
    let bytes = fs::read(dir.join("data.bin")).unwrap();
    assert_eq!(&bytes[..4], b"FVMD");
    let manifest = json(dir.join("manifest.json"));
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["config"]["family"], "allen_cahn");
    assert_eq!(artifact_hash(&manifest, "data.bin"), meta["content_hash"].as_str().unwrap());
    assert_eq!(entries(out.path()), vec![out.path().join("allen_cahn")]);
}

#[test]
fn csv_export_is_optional() {
    let out = tempfile::tempdir().unwrap();
    ok(out.path(), &["generate", "--family", "allen_cahn", "--split", "train", "--format", "csv"]);
    let text = fs::read_to_string(out.path().join("allen_cahn/train/data.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 201 * 49);
}

#[test]
fn evaluation_references_the_trained_checkpoint_and_data() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path();
    ok(o, &["generate", "--family", "allen_cahn", "--split", "train"]);
    ok(o, &["train", "--family", "allen_cahn", "--data", ".", "--set", "train.epochs=2"]);
    ok(o, &["evaluate", "--model", "runs/allen_cahn/seed_0", "--data", ".", "--split", "train"]);
    let run = o.join("runs/allen_cahn/seed_0");
    let train_manifest = json(run.join("manifest.json"));
    let eval_manifest = json(run.join("eval/manifest.json"));
    let report = json(run.join("eval/report.json"));
    let ckpt = artifact_hash(&train_manifest, "model.ckpt");
    assert_eq!(report["checkpoint_hash"], ckpt.as_str());
    assert_eq!(input_hash(&eval_manifest, "checkpoint"), ckpt);
    let data_hash = input_hash(&train_manifest, "train_data");
    assert_eq!(report["splits"][0]["dataset_hash"], data_hash.as_str());
    assert_eq!(train_manifest["summary"]["losses"].as_array().unwrap().len(), 3);

    ok(o, &["extract", "--model", "runs/allen_cahn/seed_0", "--data", ".", "--points", "11"]);
    let table = fs::read_to_string(run.join("functions/function_reaction.csv")).unwrap();
    assert_eq!(table.lines().count(), 12);
}

#[test]
fn tampered_checkpoints_are_refused() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path();
    ok(o, &["train", "--family", "allen_cahn", "--set", "train.epochs=1"]);
    let ckpt = o.join("runs/allen_cahn/seed_0/model.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&ckpt, bytes).unwrap();
    let r = finn(o, &["evaluate", "--model", "runs/allen_cahn/seed_0", "--split", "train"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!o.join("runs/allen_cahn/seed_0/eval").exists());
}

#[test]
fn euler_ablation_on_sorption_records_a_nan_epoch() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path();
    ok(
        o,
        &["ablate", "euler", "--family", "diffusion_sorption", "--split", "train", "--set", "train.epochs=2"],
    );
    let dir = o.join("ablations/diffusion_sorption/euler/seed_0");
    let record = json(dir.join("variant/run_record.json"));
    assert_eq!(record["nan_epoch"], 0);
    let baseline = json(dir.join("baseline/run_record.json"));
    assert!(baseline["nan_epoch"].is_null());
    let comparison = json(dir.join("comparison.json"));
    assert_eq!(comparison["variant"]["nan_epoch"], 0);
    assert_eq!(json(dir.join("variant/model.json"))["train"]["integrator"]["scheme"], "euler");
}

#[test]
fn polynomial_ablation_replaces_the_network() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path();
    ok(
        o,
        &["ablate", "polynomial", "--family", "allen_cahn", "--split", "train", "--set", "train.epochs=1", "--set", "ablation.polynomial_order=4"],
    );
    let dir = o.join("ablations/allen_cahn/polynomial/seed_0");
    let variant = json(dir.join("variant/model.json"));
    assert_eq!(variant["config"]["reaction"]["kind"], "polynomial");
    assert_eq!(variant["config"]["reaction"]["order"], 4);
    let comparison = json(dir.join("comparison.json"));
    assert!(comparison["variant"]["parameters"].as_u64().unwrap() < comparison["baseline"]["parameters"].as_u64().unwrap());
}

#[test]
fn unknown_keys_are_rejected_without_outputs() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path();
    let cfg = o.join("cfg.json");
    fs::write(&cfg, r#"{"family": "allen_cahn", "train": {"epochz": 1}}"#).unwrap();
    let r = finn(o, &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("epochz"));
    let r = finn(o, &["train", "--family", "allen_cahn", "--set", "model.reactoin.order=3"]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(entries(o), vec![cfg]);
}

#[test]
fn overrides_win_over_the_config_file() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path();
    let cfg = o.join("cfg.json");
    fs::write(&cfg, r#"{"family": "allen_cahn", "seed": 4, "train": {"epochs": 5}}"#).unwrap();
    ok(o, &["train", "--config", cfg.to_str().unwrap(), "--set", "train.epochs=1"]);
    let record = json(o.join("runs/allen_cahn/seed_4/run_record.json"));
    assert_eq!(record["losses"].as_array().unwrap().len(), 2);
}

#[test]
fn reruns_reproduce_artifact_hashes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for o in [a.path(), b.path()] {
        ok(o, &["generate", "--family", "burgers1d", "--split", "train"]);
        ok(o, &["train", "--family", "burgers1d", "--data", ".", "--set", "train.epochs=2"]);
    }
    for rel in ["burgers1d/train/manifest.json", "runs/burgers1d/seed_0/manifest.json"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
    // Rerunning into the same root replaces the run with identical content.
    let before = fs::read(a.path().join("runs/burgers1d/seed_0/manifest.json")).unwrap();
    ok(a.path(), &["train", "--family", "burgers1d", "--data", ".", "--set", "train.epochs=2"]);
    assert_eq!(fs::read(a.path().join("runs/burgers1d/seed_0/manifest.json")).unwrap(), before);
    assert_eq!(entries(&a.path().join("runs/burgers1d")), vec![a.path().join("runs/burgers1d/seed_0")]);
}

#[test]
fn failures_leave_no_partial_outputs() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path();
    // Fails inside the staged run, after training has started writing.
    let r = finn(
        o,
        &["train", "--family", "allen_cahn", "--set", "train.epochs=1", "--set", "train.checkpoint_every=1", "--set", "train.checkpoint_dir=/abs"],
    );
    assert_eq!(r.status.code(), Some(1));
    assert!(entries(o).is_empty(), "{:?}", entries(o));
    let r = finn(o, &["train", "--family", "allen_cahn", "--data", "missing"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(entries(o).is_empty());
}

#[test]
fn seeds_fan_out_into_separate_runs() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path();
    ok(o, &["train", "--family", "allen_cahn", "--seeds", "1..2", "--set", "train.epochs=1"]);
    let a = json(o.join("runs/allen_cahn/seed_1/manifest.json"));
    let b = json(o.join("runs/allen_cahn/seed_2/manifest.json"));
    assert_eq!(a["config"]["seed"], 1);
    assert_eq!(b["config"]["seed"], 2);
    assert_ne!(artifact_hash(&a, "model.ckpt"), artifact_hash(&b, "model.ckpt"));
    assert_eq!(finn(o, &["generate", "--family", "allen_cahn", "--seeds", "1,2"]).status.code(), Some(1));
}

#[test]
fn data_root_comes_from_the_environment() {
    let out = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_finn"))
        .args(["generate", "--family", "allen_cahn", "--split", "train"])
        .env("FINN_DATA_ROOT", out.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.path().join("allen_cahn/train/data.bin").exists());
}

#[test]
fn ingest_validates_observations() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path();
    let good = o.join("good.csv");
    fs::write(&good, "time,location,value\n1.5,breakthrough,0.01\n3.0,breakthrough,0.02\n").unwrap();
    ok(o, &["ingest", "--sample", "#2", "--file", good.to_str().unwrap()]);
    let stored = json(o.join("observations/2/observations.json"));
    assert_eq!(stored["sample"], "#2");
    assert_eq!(stored["rows"].as_array().unwrap().len(), 2);

    let bad = o.join("bad.csv");
    fs::write(&bad, "time,location,value\n1.5,breakthrough,-0.01\n").unwrap();
    let r = finn(o, &["ingest", "--sample", "#1", "--file", bad.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!o.join("observations/1").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(finn(out.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(finn(out.path(), &["generate", "--family", "heat"]).status.code(), Some(2));
    assert_eq!(finn(out.path(), &["generate", "--family", "allen_cahn", "--split", "validation"]).status.code(), Some(2));
}
