use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlab")).args(args).output().expect("spawn mlab")
}

fn ok(args: &[&str]) -> Output {
    let out = mlab(args);
    assert!(
        out.status.success(),
        "mlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn datagen(dir: &TempDir, name: &str, size: &str, seed: &str) -> PathBuf {
    let out = p(dir, name);
    ok(&["datagen", "--size", size, "--seed", seed, "--out", s(&out), "--max-len", "10"]);
    out
}

fn student(dir: &TempDir, data: &Path) -> PathBuf {
    let out = p(dir, "student.mxc");
    ok(&["distill", "--data", s(data), "--seed", "5", "--out", s(&out), "--epochs", "1", "--batch-size", "16"]);
    out
}

#[test]
fn datagen_is_byte_deterministic_with_manifest() {
    let dir = TempDir::new().unwrap();
    let a = datagen(&dir, "a.jsonl", "90", "3");
    let b = datagen(&dir, "b.jsonl", "90", "3");
    let c = datagen(&dir, "c.jsonl", "90", "4");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 90);
    let m = json(&p(&dir, "a.jsonl.manifest.json"));
    assert_eq!(m["command"], "datagen");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["outputs"][0], s(&a));
}

#[test]
fn distill_quantize_evaluate() {
    let dir = TempDir::new().unwrap();
    let data = datagen(&dir, "d.jsonl", "120", "1");
    let model = student(&dir, &data);
    let again = p(&dir, "again.mxc");
    ok(&["distill", "--data", s(&data), "--seed", "5", "--out", s(&again), "--epochs", "1", "--batch-size", "16"]);
    assert_eq!(fs::read(&model).unwrap(), fs::read(&again).unwrap());

    let q = p(&dir, "q.mxc");
    ok(&["quantize", "--model", s(&model), "--method", "gptq", "--bits", "4", "--calib", s(&data),
        "--calib-size", "16", "--seed", "2", "--out", s(&q)]);
    assert!(fs::metadata(&q).unwrap().len() < fs::metadata(&model).unwrap().len());
    let manifest = json(&p(&dir, "q.mxc.manifest.json"));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);

    let report = p(&dir, "eval.json");
    ok(&["evaluate", "--model", s(&q), "--data", s(&data), "--seed", "5", "--baseline", s(&model),
        "--out", s(&report)]);
    let r = json(&report);
    let tau = r["report"]["average_tau"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&tau));
    assert!(r["degradation"].as_f64().unwrap().is_finite());

    // Re-quantizing a quantized model is refused.
    let out = mlab(&["quantize", "--model", s(&q), "--method", "affine", "--seed", "1", "--out", s(&p(&dir, "qq"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn layer_drop_with_bitfit_then_evaluate_and_combine() {
    let dir = TempDir::new().unwrap();
    let data = datagen(&dir, "d.jsonl", "60", "2");
    let model = student(&dir, &data);
    let pruned = p(&dir, "pruned.mxc");
    let report = p(&dir, "prune.json");
    ok(&["prune", "--model", s(&model), "--method", "layers", "--n", "1", "--finetune", "bitfit", "--data", s(&data),
        "--seed", "1", "--out", s(&pruned), "--report", s(&report)]);
    let pr = json(&report);
    assert_eq!(pr["retained_layers"], serde_json::json!([1]));

    let e1 = p(&dir, "e1.json");
    let e2 = p(&dir, "e2.json");
    ok(&["evaluate", "--model", s(&pruned), "--data", s(&data), "--seed", "1", "--prune-report", s(&report),
        "--out", s(&e1)]);
    assert_eq!(json(&e1)["prune"]["retained_layers"], serde_json::json!([1]));
    ok(&["evaluate", "--model", s(&model), "--data", s(&data), "--seed", "2", "--out", s(&e2)]);
    let avg = p(&dir, "avg.json");
    ok(&["evaluate", "--combine", s(&e1), s(&e2), "--out", s(&avg)]);
    assert_eq!(json(&avg)["seeds"], serde_json::json!([1, 2]));

    let sparse = p(&dir, "sparse.mxc");
    ok(&["prune", "--model", s(&model), "--method", "wanda", "--pattern", "4:8", "--calib", s(&data),
        "--seed", "1", "--out", s(&sparse)]);
    let bench = p(&dir, "bench.json");
    ok(&["bench", "--model", s(&sparse), "--data", s(&data), "--memory-cap-mb", "64", "--ceiling", "16",
        "--out", s(&bench)]);
    assert!(json(&bench)["peak_bytes"]["max"].as_f64().unwrap() > 0.0);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(mlab(&["--help"]).status.code(), Some(0));
    assert_eq!(mlab(&["datagen", "--size", "3", "--seed", "1", "--bogus"]).status.code(), Some(1));
    assert_eq!(mlab(&["no-such-command"]).status.code(), Some(1));
    let missing = p(&dir, "missing.jsonl");
    let out = mlab(&["distill", "--data", s(&missing), "--seed", "1", "--out", s(&p(&dir, "m"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = mlab(&["prune", "--model", "x", "--method", "magnitude", "--pattern", "3:7", "--seed", "1", "--out", "y"]);
    assert_eq!(out.status.code(), Some(1));

    // A corrupt model file is bad input.
    let garbage = p(&dir, "garbage.mxc");
    fs::write(&garbage, b"not a model").unwrap();
    let data = datagen(&dir, "d.jsonl", "6", "1");
    let out = mlab(&["evaluate", "--model", s(&garbage), "--data", s(&data), "--out", s(&p(&dir, "e.json"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    // Failing to write the output is a runtime error.
    let out = mlab(&["datagen", "--size", "6", "--seed", "1", "--out", s(&p(&dir, "nope/d.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn estimate_cost_defaults() {
    let dir = TempDir::new().unwrap();
    let out_path = p(&dir, "cost.json");
    let out = ok(&["estimate-cost", "--out", s(&out_path)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["hours"].as_f64().unwrap() - 138.888).abs() < 0.01);
    assert!((v["kwh"].as_f64().unwrap() - 48.611).abs() < 0.01);
    assert!((v["kg_co2"].as_f64().unwrap() - 17.889).abs() < 0.01);
    assert!(v["note"].as_str().unwrap().contains("142.2"));
    assert_eq!(json(&out_path), v);
    let custom = ok(&["estimate-cost", "--examples", "3600", "--sec-per-example", "1", "--watts", "1000"]);
    let v: serde_json::Value = serde_json::from_slice(&custom.stdout).unwrap();
    assert_eq!(v["kwh"], 1.0);
    assert!(v["note"].is_null());
    assert_eq!(mlab(&["estimate-cost", "--watts=-3"]).status.code(), Some(1));
}
