use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nowcast_xai::service::{run_pipeline, run_stage, Api, RunConfig, Stage, Store};
use sha2::{Digest, Sha256};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast-xai"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn smoke_config(dir: &Path) -> PathBuf {
    let p = dir.join("smoke.json");
    fs::write(&p, RunConfig::smoke().to_json()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = bin(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"seed": 1, "unknown": true}"#).unwrap();
    let out = bin(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let mut c = RunConfig::smoke();
    c.train.epochs = 0;
    fs::write(&cfg, c.to_json()).unwrap();
    let out = bin(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));
}

#[test]
fn execution_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let store_dir = dir.path().join("store");
    let out = bin(&["gen-data", "--config", s(&cfg), "--out", s(&store_dir)]);
    assert_eq!(out.status.code(), Some(0));
    let id = RunConfig::smoke().run_id();
    assert!(String::from_utf8_lossy(&out.stdout).starts_with(&id));
    fs::remove_file(store_dir.join("runs").join(&id).join("data/split.json")).unwrap();
    let out = bin(&["train", "--run-id", &id, "--out", s(&store_dir)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_with_the_same_seed_gives_identical_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let mut hashes = Vec::new();
    for sub in ["a", "b"] {
        let out_dir = dir.path().join(sub);
        let out = bin(&["train", "--config", s(&cfg), "--seed", "7", "--out", s(&out_dir)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let id = RunConfig { seed: 7, ..RunConfig::smoke() }.run_id();
        let w = fs::read(out_dir.join("runs").join(id).join("model/segmentation.grdf")).unwrap();
        hashes.push(hex::encode(Sha256::digest(&w)));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn report_csv_equals_service_export() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let rec = run_pipeline(&store, &RunConfig::smoke()).unwrap();
    let out = bin(&["report", "--run-id", &rec.run_id, "--format", "csv", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let api = Api::new(store.clone(), &rec.run_id).unwrap();
    let served = api.handle("GET", "/v1/export/stratified.csv", "");
    assert_eq!(served.status, 200);
    assert_eq!(out.stdout, served.body);
    assert_eq!(out.stdout, fs::read(store.run_dir(&rec.run_id).join("report/stratified.csv")).unwrap());

    let json = bin(&["report", "--run-id", &rec.run_id, "--format", "json", "--out", s(dir.path())]);
    let rows: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 36);
}

#[test]
fn serve_refuses_an_unfinished_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let rec = run_stage(&store, &RunConfig::smoke(), Stage::GenData).unwrap();
    for args in [vec!["serve", "--run-id", rec.run_id.as_str()], vec!["serve"]] {
        let mut args = args.clone();
        args.extend(["--out", s(dir.path()), "--addr", "127.0.0.1:0"]);
        let out = bin(&args);
        assert_eq!(out.status.code(), Some(2));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(&format!("report --run-id {}", rec.run_id)), "{err}");
    }
}
