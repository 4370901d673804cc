use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn quadcomp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadcomp")).args(args).current_dir(dir).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn generate(dir: &Path, name: &str, count: &str, seed: &str) {
    let o = quadcomp(&["generate", "--count", count, "--out", name, "--seed", seed], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_writes_shapes_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "a", "3", "7");
    generate(t.path(), "b", "3", "7");
    let lpc = fs::read_dir(t.path().join("a")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "lpc")).count();
    assert_eq!(lpc, 3);
    let m = read_json(&t.path().join("a/manifest.json"));
    assert_eq!(m["shapes"].as_array().unwrap().len(), 3);
    assert_eq!(m["seed"], 7);
    assert_eq!(fs::read(t.path().join("a/manifest.json")).unwrap(), fs::read(t.path().join("b/manifest.json")).unwrap());
}

#[test]
fn invalid_inputs_exit_with_usage_code() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("spec.json"), r#"{"primitive_count_range": [5, 2]}"#).unwrap();
    assert_eq!(code(&quadcomp(&["generate", "--count", "1", "--out", "d", "--spec", "spec.json"], t.path())), 2);
    assert_eq!(code(&quadcomp(&["train", "--data", "missing", "--out", "m.ckpt"], t.path())), 2);
    fs::write(t.path().join("bad.json"), r#"{"unknown": true}"#).unwrap();
    generate(t.path(), "d", "1", "0");
    assert_eq!(code(&quadcomp(&["train", "--data", "d", "--config", "bad.json", "--out", "m.ckpt"], t.path())), 2);
    assert_eq!(code(&quadcomp(&["frobnicate"], t.path())), 2);
}

#[test]
fn non_finite_training_exits_with_numeric_code() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "d", "2", "0");
    fs::write(t.path().join("hot.json"), r#"{"optimizer": {"lr": 1e12, "batch_size": 2}}"#).unwrap();
    let o = quadcomp(&["train", "--data", "d", "--config", "hot.json", "--out", "m.ckpt", "--steps", "30", "--log", "log.jsonl"], t.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(t.path().join("log.jsonl")).unwrap();
    let last: Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert!(last["term"].is_string(), "{last}");
}

#[test]
fn resumed_training_is_bit_identical() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    generate(p, "d", "3", "1");
    fs::write(p.join("cfg.json"), r#"{"optimizer": {"batch_size": 2}, "data": {"input_points": 128}}"#).unwrap();
    let base = ["train", "--data", "d", "--config", "cfg.json"];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        let o = quadcomp(&args, p);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["--out", "full.ckpt", "--steps", "4", "--log", "full.jsonl"]);
    run(&["--out", "part.ckpt", "--steps", "2", "--log", "part.jsonl"]);
    run(&["--out", "part.ckpt", "--steps", "2", "--log", "part.jsonl", "--resume"]);
    assert_eq!(fs::read(p.join("full.ckpt")).unwrap(), fs::read(p.join("part.ckpt")).unwrap());
    assert_eq!(fs::read(p.join("full.ckpt.opt")).unwrap(), fs::read(p.join("part.ckpt.opt")).unwrap());
    assert_eq!(fs::read_to_string(p.join("full.jsonl")).unwrap(), fs::read_to_string(p.join("part.jsonl")).unwrap());
    let first: Value = serde_json::from_str(fs::read_to_string(p.join("full.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "total", "semantic", "membership", "chamfer", "param", "null", "points"] {
        assert!(first.get(key).is_some(), "log misses {key}");
    }
}

#[test]
fn eval_and_infer_outputs() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    generate(p, "d", "2", "2");
    let o = quadcomp(&["eval", "--oracle", "--data", "d", "--report", "oracle.json"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&p.join("oracle.json"));
    assert!(r["cd"].as_f64().unwrap() < 1e-12 && r["hd"].as_f64().unwrap() < 1e-12);
    assert!((r["nc"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(r["cov"].as_f64().unwrap(), 100.0);
    let keys = ["cd", "hd", "nc", "fscore", "primitive_f1", "type_acc", "axis_deg", "res", "cov", "evaluated", "matched"];
    assert_eq!(r.as_object().unwrap().len(), keys.len());
    keys.iter().for_each(|k| assert!(r.get(*k).is_some(), "{k}"));

    assert_eq!(code(&quadcomp(&["train", "--data", "d", "--out", "m.ckpt", "--steps", "2", "--log", "l.jsonl"], p)), 0);
    let o = quadcomp(&["eval", "--model", "m.ckpt", "--data", "d", "--report", "sweep.json", "--sweep"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = read_json(&p.join("sweep.json"));
    let sweep = sweep.as_array().unwrap();
    assert_eq!(sweep.iter().map(|e| e["threshold"].as_f64().unwrap()).collect::<Vec<_>>(), vec![0.3, 0.5, 0.7]);

    let scan = p.join("d/shape_0000.lpc");
    let scan = scan.to_str().unwrap();
    assert_eq!(code(&quadcomp(&["infer", "--model", "m.ckpt", "--in", scan, "--out", "raw.json", "--threshold", "0"], p)), 0);
    assert_eq!(code(&quadcomp(&["infer", "--model", "m.ckpt", "--in", scan, "--out", "proj.json", "--threshold", "0", "--project"], p)), 0);
    assert_eq!(code(&quadcomp(&["infer", "--model", "m.ckpt", "--in", scan, "--out", "none.json", "--threshold", "1"], p)), 0);
    let raw = read_json(&p.join("raw.json"));
    let proj = read_json(&p.join("proj.json"));
    assert!(raw.as_array().unwrap().iter().all(|r| r.get("points").is_none()));
    assert!(proj.as_array().unwrap().iter().all(|r| r["points"].is_array()));
    assert_eq!(raw.as_array().unwrap().len(), proj.as_array().unwrap().len());
    assert_eq!(read_json(&p.join("none.json")), Value::Array(vec![]));
}

#[test]
fn gradcheck_command_passes_and_names_corrupted_layer() {
    let t = tempfile::tempdir().unwrap();
    let o = quadcomp(&["gradcheck", "--seeds", "1", "--report", "gc.json"], t.path());
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}");
    assert!(out.contains("heads.semantic"), "per-layer report missing");
    let o = quadcomp(&["gradcheck", "--seeds", "1", "--corrupt", "heads.geometry"], t.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("heads.geometry"));
}
