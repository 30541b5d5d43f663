use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn jgrp2o(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jgrp2o"))
        .args(args)
        .env("JGRP2O_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = jgrp2o(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Sorted `(relative path, bytes)` for every file under `dir`.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn train_tiny(out: &Path) {
    let cfg = config("tiny.toml");
    ok(&["train", "--config", s(&cfg), "--data", "synth", "--epochs", "5", "--seed", "7", "--out", s(out)]);
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_tiny(&a);
    train_tiny(&b);
    for f in ["config.toml", "train_log.csv", "last.ckpt", "epoch_0005.ckpt"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 5);
    assert!(log.starts_with("epoch,step,lr,total,coord_s1,offset_s1,coord_s2,offset_s2\n"));
    assert_eq!(log, fs::read_to_string(b.join("train_log.csv")).unwrap());
    assert_eq!(fs::read(a.join("last.ckpt")).unwrap(), fs::read(b.join("last.ckpt")).unwrap());
    assert!(fs::read_to_string(a.join("config.toml")).unwrap().contains("seed = 7"));

    let ckpt = a.join("last.ckpt");
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", "synth", "--out", s(&e1)]);
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", "synth", "--out", s(&e2)]);
    assert_eq!(tree(&e1), tree(&e2));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(e1.join("report.json")).unwrap()).unwrap();
    let err = report["mean_error_mm"].as_f64().unwrap();
    assert!(err.is_finite() && err > 0.0);
    assert_eq!(report["frames"], 16);

    let oracle = dir.path().join("oracle");
    ok(&["eval", "--checkpoint", s(&ckpt), "--oracle", "--out", s(&oracle)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(oracle.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mean_error_mm"], 0.0);
    let curve = fs::read_to_string(oracle.join("curve.csv")).unwrap();
    assert!(curve.lines().skip(2).all(|l| l.ends_with(",1")), "{curve}");

    let frames = dir.path().join("frames");
    ok(&["synth", "--count", "3", "--seed", "5", "--config", s(&config("tiny.toml")), "--out", s(&frames)]);
    let pred = dir.path().join("pred");
    ok(&["infer", "--checkpoint", s(&ckpt), "--data", s(&frames), "--out", s(&pred)]);
    let csv = fs::read_to_string(pred.join("predictions.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("frame,joint,u,v,z,x_mm,y_mm,z_mm"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 4);
    assert!(rows.iter().all(|r| r.split(',').count() == 8));
}

#[test]
fn resume_appends_to_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("tiny.toml");
    let (whole, part) = (dir.path().join("whole"), dir.path().join("part"));
    ok(&["train", "--config", s(&cfg), "--epochs", "4", "--out", s(&whole)]);
    ok(&["train", "--config", s(&cfg), "--epochs", "2", "--out", s(&part)]);
    let ckpt = part.join("last.ckpt");
    ok(&["train", "--config", s(&cfg), "--epochs", "4", "--resume", s(&ckpt), "--out", s(&part)]);
    assert_eq!(
        fs::read_to_string(whole.join("train_log.csv")).unwrap(),
        fs::read_to_string(part.join("train_log.csv")).unwrap()
    );
    assert_eq!(fs::read(whole.join("last.ckpt")).unwrap(), fs::read(part.join("last.ckpt")).unwrap());
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["synth", "--count", "16", "--seed", "1", "--out", s(&a)]);
    ok(&["synth", "--count", "16", "--seed", "1", "--out", s(&b)]);
    ok(&["synth", "--count", "16", "--seed", "2", "--out", s(&c)]);
    let ta = tree(&a);
    assert_eq!(ta.len(), 16 + 2);
    assert_eq!(ta, tree(&b));
    assert_ne!(ta, tree(&c));
}

#[test]
fn params_reports_the_full_budget() {
    let total = |extra: &[&str]| -> usize {
        let full = config("full.toml");
        let mut args = vec!["params", "--config", s(&full)];
        args.extend(extra);
        let out = ok(&args);
        let line = out.lines().find(|l| l.starts_with("total")).unwrap();
        line.split_whitespace().last().unwrap().parse().unwrap()
    };
    let two = total(&[]);
    assert!((1_200_000..=1_600_000).contains(&two), "{two}");
    let one = total(&["--override", "backbone.stages=1", "--override", "loss.stages=1"]);
    assert!((600_000..=900_000).contains(&one), "{one}");
}

#[test]
fn usage_and_config_errors_exit_2() {
    let out = jgrp2o(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = jgrp2o(&["params", "--override", "backbone.colour=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("backbone.colour"));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    for cmd in ["eval", "infer"] {
        let out = jgrp2o(&[cmd, "--checkpoint", s(&missing), "--out", s(dir.path())]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
    }
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("tiny.toml");
    let out = jgrp2o(&[
        "train",
        "--config",
        s(&cfg),
        "--epochs",
        "20",
        "--override",
        "train.learning_rate=1e38",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
