use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn reachnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reachnet")).args(args).output().expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().expect("a summary line")).expect("summary is JSON")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).expect("error is JSON")
}

fn data_rows(path: &Path) -> usize {
    let text = fs::read_to_string(path).unwrap();
    text.lines().filter(|l| !l.starts_with('#')).count() - 1
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = reachnet(&["generate", "--model", "pendulum", "--count", "10000", "--strategy", "uniform", "--T", "5", "--seed", "7", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v = stdout_json(&o);
        assert_eq!(v["count"], 10000);
        assert!(v["positive_fraction"].as_f64().unwrap() > 0.0);
    }
    assert_eq!(data_rows(&a), 10000);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let text = fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("# tool=reachnet "));
    assert!(text.contains("# config={"));
}

#[test]
fn unknown_model_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = reachnet(&["generate", "--model", "rocket", "--count", "10", "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "unknown-model");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("pendulum") && msg.contains("neuron") && msg.contains("quadcopter"));
}

#[test]
fn bad_flags_are_usage_errors() {
    let o = reachnet(&["generate", "--count", "ten", "--out", "x.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "usage");
    let o = reachnet(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn train_missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = reachnet(&["train", "--data", p(&dir.path().join("none.csv")), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "io");
}

#[test]
fn train_ensemble_writes_members_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.csv");
    let o = reachnet(&["generate", "--model", "pendulum", "--count", "300", "--T", "1", "--seed", "3", "--out", p(&data)]);
    assert!(o.status.success());
    let manifest = dir.path().join("ens.json");
    let o = reachnet(&["train", "--data", p(&data), "--arch", "ens1", "--epochs", "5", "--out", p(&manifest)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..5 {
        assert!(dir.path().join(format!("ens.m{i}.json")).exists());
    }
    let m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["kind"], "ensemble");
    assert_eq!(m["members"].as_array().unwrap().len(), 5);
    assert_eq!(m["trained_on"]["tool"], "reachnet");
    let log = fs::read_to_string(dir.path().join("ens.log.csv")).unwrap();
    assert!(log.contains("member,epoch,loss,val_loss,mu"));

    let o = reachnet(&["eval", "--net", p(&manifest), "--data", p(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let acc = stdout_json(&o)["metrics"]["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn pipeline_then_analyses() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = reachnet(&["pipeline", "--model", "pendulum", "--T", "1", "--seed", "5", "--train-size", "600", "--test-size", "400", "--epochs", "30", "--out-dir", p(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    let train_acc = v["train_metrics"]["acc"].as_f64().unwrap();
    let test_acc = v["test_metrics"]["acc"].as_f64().unwrap();
    assert!(train_acc > 0.9 && test_acc > 0.9, "train {train_acc} test {test_acc}");
    for f in ["train.csv", "test.csv", "model.json", "train.log.csv", "eval.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["T"], 1.0);
    assert!(report["version"].is_string());

    let model = run.join("model.json");
    let heat = dir.path().join("heat.csv");
    let o = reachnet(&["region", "--model", "pendulum", "--T", "1", "--net", p(&model), "--grid", "2x3", "--per-cell", "20", "--out", p(&heat)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_rows(&heat), 6);

    let sweep = dir.path().join("sweep.csv");
    let tuned = dir.path().join("tuned.json");
    let o = reachnet(&["threshold", "--net", p(&model), "--data", p(&run.join("test.csv")), "--max-acc-loss", "0.005", "--out", p(&sweep), "--apply", p(&tuned)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = stdout_json(&o);
    let theta = t["theta"].as_f64().unwrap();
    assert!(t["metrics"]["fn"].as_f64().unwrap() <= t["baseline"]["fn"].as_f64().unwrap());
    assert_eq!(data_rows(&sweep), 99);
    let net: Value = serde_json::from_str(&fs::read_to_string(&tuned).unwrap()).unwrap();
    assert_eq!(net["threshold"].as_f64().unwrap(), theta);

    let adapted = dir.path().join("adapted.json");
    let o = reachnet(&["adapt", "--net", p(&model), "--data", p(&run.join("test.csv")), "--iterations", "2", "--per-iter", "100", "--out", p(&adapted)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(adapted.exists());

    let o = reachnet(&["certify", "--net", p(&model), "--model", "pendulum", "--T", "1", "--max-samples", "50"]);
    assert!(matches!(o.status.code(), Some(0 | 1 | 3)));
}

#[test]
fn certify_oracle_is_satisfied() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cert.json");
    let o = reachnet(&["certify", "--oracle", "--model", "pendulum", "--metric", "acc", "--theta", "0.995", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert_eq!(v["verdict"]["decision"], "satisfied");
    assert_eq!(v["verdict"]["samples_used"], 2287);
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["config"]["sprt"]["theta"], 0.995);
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"model": "neuron", "T": 2.0, "seed": 9, "train_size": 40}"#).unwrap();
    let out = dir.path().join("d.csv");
    let o = reachnet(&["generate", "--config", p(&cfg), "--seed", "10", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!((v["model"].as_str(), v["count"].as_u64(), v["seed"].as_u64()), (Some("neuron"), Some(40), Some(10)));

    fs::write(&cfg, r#"{"modle": "neuron"}"#).unwrap();
    let o = reachnet(&["generate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "parse");
}

#[test]
fn timebound_writes_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tb.csv");
    let o = reachnet(&["timebound", "--model", "pendulum", "--t-grid", "0.5,1", "--train-size", "200", "--test-size", "100", "--arch", "snn", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("\nT,acc,acc_lo,acc_hi,fn"));
    assert_eq!(data_rows(&out), 2);
}
