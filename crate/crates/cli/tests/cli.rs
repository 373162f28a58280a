//! The `physformer` binary end to end: exit codes, artifacts, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_physformer"));
    c.env_remove("PHYSFORMER_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn physformer")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = walk(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap())).collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    std::fs::read_dir(dir)
        .unwrap()
        .flat_map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p)
            } else {
                vec![p]
            }
        })
        .collect()
}

/// A one-epoch PhysFormer++ on 64×64 clips small enough for a test.
const TINY: &str = r#"{
    "model": "physformerpp",
    "epochs": 1,
    "architecture": {
        "kind": "physformerpp", "frames": 48, "height": 64, "width": 64,
        "dim": 8, "ff_dim": 12, "heads": 2, "tau": 2.0, "theta": 0.7, "lambda": 0.5,
        "blocks": 3, "slow_tube": [4, 4, 4], "fast_tube": [2, 4, 4]
    }
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn synth_gen_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth-gen", "--clips", "8", "--seed", "7", "--out", d.to_str().unwrap()]);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() >= 8);
    assert_eq!(fa, fb);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = out.to_str().unwrap();
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--config", "/nonexistent.json", "--out", o]).status.code(), Some(2));
    assert_eq!(run(&["train", "--model", "resnet", "--out", o]).status.code(), Some(2));
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"lr": -1.0}"#).unwrap();
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap(), "--out", o]).status.code(), Some(2));
    let threads = bin().env("PHYSFORMER_THREADS", "zero").args(["gradcheck"]).output().unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("x.csv");
    let out = run(&["infer", "--checkpoint", "/nonexistent", "--clips", "1", "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck"]);
    assert!(stdout.contains("49 of 49 cases pass"), "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn train_infer_eval_export_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    let (c, r) = (cfg.to_str().unwrap(), run_dir.to_str().unwrap());
    ok(&["train", "--config", c, "--clips", "10", "--seed", "3", "--out", r]);
    for f in ["curves.csv", "validation.csv", "train_config.json", "checkpoint/manifest.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let ckpt = run_dir.join("checkpoint");
    let k = ckpt.to_str().unwrap();

    let csv = tmp.path().join("signal.csv");
    ok(&["infer", "--checkpoint", k, "--seed", "3", "--clip", "1", "--out", csv.to_str().unwrap()]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame,time_s,predicted,ground_truth"));
    assert_eq!(lines.count(), 300);

    let eval_dir = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", k, "--clips", "10", "--seed", "3", "--out", eval_dir.to_str().unwrap()]);
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["metrics"]["mae"].as_f64().unwrap() >= 0.0);
    assert_eq!(std::fs::read_to_string(eval_dir.join("clips.csv")).unwrap().lines().count(), 1 + 2);

    let maps = tmp.path().join("maps");
    ok(&["export-attention", "--checkpoint", k, "--seed", "3", "--out", maps.to_str().unwrap()]);
    let names: Vec<String> = walk(&maps).iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert!(names.iter().any(|n| n.starts_with("slow.blocks.0.periodic") && n.ends_with(".pgm")));
    assert!(names.iter().any(|n| n.starts_with("peak_map") && n.ends_with(".tnsr")));
    assert!(names.iter().any(|n| n.contains(".attention.h0.pgm")));

    let svg = tmp.path().join("curves.svg");
    ok(&["plot", "--input", run_dir.join("curves.csv").to_str().unwrap(), "--y", "total,ce", "--out", svg.to_str().unwrap()]);
    let svg = std::fs::read_to_string(svg).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
}

#[test]
fn checkpoints_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let mut snapshots = Vec::new();
    for threads in ["1", "4"] {
        let dir = tmp.path().join(format!("t{threads}"));
        let out = bin()
            .env("PHYSFORMER_THREADS", threads)
            .args(["train", "--config", cfg.to_str().unwrap(), "--clips", "10", "--seed", "5", "--out", dir.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        snapshots.push(files(&dir.join("checkpoint")));
    }
    assert_eq!(snapshots[0], snapshots[1]);
}
