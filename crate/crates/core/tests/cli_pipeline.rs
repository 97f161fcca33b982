use std::path::Path;
use std::process::{Command, Output};

use tia_core::trainer::{ExperimentConfig, METRICS_HEADER};

fn tia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tia"))
        .args(args)
        .output()
        .expect("spawn tia")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let cfg = ExperimentConfig {
        iterations: 60,
        eval_interval: 20,
        data_dir: Some(data.to_path_buf()),
        ..ExperimentConfig::default()
    };
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn gen_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = tia(&["gen", "--spec", "default", "--seed", "3", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["source_train.csv", "source_test.csv", "target_train.csv", "target_test.csv", "spec.json"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    let head = std::fs::read_to_string(data.join("target_test.csv")).unwrap();
    assert!(head.starts_with("domain,y,b_cx,b_cy,b_w,b_h,x_0,"));

    let cfg = small_config(dir.path(), &data);
    let run = dir.path().join("run");
    let out = tia(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
    let iters: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["0", "20", "40", "60"]);

    let report = dir.path().join("eval.json");
    let out = tia(&["eval", "--model", s(&run.join("model.json")), "--data", s(&data), "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // evaluating the saved model reproduces what training reported
    let a: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(a, b);

    let single = dir.path().join("single.json");
    let out = tia(&[
        "eval",
        "--model",
        s(&run.join("model.json")),
        "--data",
        s(&data.join("target_test.csv")),
        "--out",
        s(&single),
    ]);
    assert!(out.status.success());
    let c: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&single).unwrap()).unwrap();
    assert_eq!(c, a["target"]);
}

#[test]
fn gen_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| std::fs::read(dir.path().join(name).join("source_train.csv")).unwrap();
    for (name, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let out = tia(&["gen", "--spec", "default", "--seed", seed, "--out", s(&dir.path().join(name))]);
        assert!(out.status.success());
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tia(&[]).status.code(), Some(1));
    assert_eq!(tia(&["frobnicate"]).status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"mode": "tia_full", "learning_rate": -1}"#).unwrap();
    let out = tia(&["train", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert!(out.stdout.is_empty());

    let cfg = ExperimentConfig {
        learning_rate: -0.5,
        ..ExperimentConfig::default()
    };
    std::fs::write(&bad, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(tia(&["train", "--config", s(&bad), "--out", s(&dir.path().join("x"))]).status.code(), Some(1));

    // blows up numerically: a runtime failure, not bad input
    let cfg = ExperimentConfig {
        learning_rate: 1e300,
        momentum: 0.0,
        iterations: 50,
        eval_interval: 50,
        ..ExperimentConfig::default()
    };
    let diverge = dir.path().join("diverge.json");
    std::fs::write(&diverge, cfg.to_json()).unwrap();
    let out = tia(&["train", "--config", s(&diverge), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteration"));

    let out = tia(&["eval", "--model", "/nonexistent/model.json", "--data", "/nonexistent", "--out", s(&bad)]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn gradcheck_command() {
    let out = tia(&["gradcheck", "--seed", "9", "--instances", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.lines().count() >= 40);
    assert!(table.lines().all(|l| l.starts_with("ok")));
    assert_eq!(tia(&["gradcheck", "--instances", "0"]).status.code(), Some(1));
}

#[test]
fn toy2d_command() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.csv");
    let out = tia(&["toy2d", "--out", s(&path), "--iterations", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("kind,x0,x1,label,p_primary,p_aux_0"));
}
