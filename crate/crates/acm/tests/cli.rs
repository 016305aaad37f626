//! End-to-end exercises of the `acm` binary: exit codes, overwrite
//! semantics, config/flag/env precedence, and the documented per-command
//! behaviors.

use std::path::Path;
use std::process::{Command, Output};

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_acm"))
}

fn run(args: &[&str]) -> Output {
    cli().args(args).output().unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, places: u32, conditions: u32, seed: u64) {
    let out = cli()
        .args([
            "generate-data",
            "--places",
            &places.to_string(),
            "--conditions",
            &conditions.to_string(),
            "--size",
            "64",
            "--seed",
            &seed.to_string(),
            "--out",
        ])
        .arg(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Sorted (relative path, byte content) listing of a directory tree.
fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_str().unwrap().to_string();
                entries.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    entries.sort();
    entries
}

#[test]
fn generate_counts_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("d1");
    let d2 = dir.path().join("d2");
    generate(&d1, 10, 2, 1);
    generate(&d2, 10, 2, 1);
    let t1 = tree_bytes(&d1);
    assert_eq!(t1.iter().filter(|(p, _)| p.ends_with(".png")).count(), 20);
    assert_eq!(t1, tree_bytes(&d2), "same flags must reproduce the directory exactly");
}

#[test]
fn generate_rejects_zero_places() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["generate-data", "--places", "0", "--out", path_str(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty(), "expected an error message");
}

#[test]
fn out_dir_overwrite_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    generate(&d, 4, 1, 1);
    // same command again without --force must refuse to clobber
    let out = cli()
        .args(["generate-data", "--places", "4", "--conditions", "1", "--seed", "1", "--out"])
        .arg(&d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "non-empty --out without --force should be refused");
    // with --force it succeeds
    let out = cli()
        .args(["generate-data", "--places", "4", "--conditions", "1", "--seed", "1", "--force", "--out"])
        .arg(&d)
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn train_missing_dataset_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli()
        .args(["train", "--epochs", "1"])
        .arg("--data")
        .arg(dir.path().join("nonexistent"))
        .arg("--out")
        .arg(dir.path().join("ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_no_geometry_zeroes_predictive_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, 8, 1, 3);
    let ckpt = dir.path().join("ckpt");
    let out = cli()
        .args(["train", "--seed", "1", "--epochs", "2", "--batch-size", "4", "--no-geometry"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(ckpt.join("train_log.ndjson")).unwrap();
    let mut records = 0;
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["L_P"].as_f64().unwrap(), 0.0, "L_P must be 0 with geometry disabled");
        records += 1;
    }
    assert!(records > 0, "log has no records");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, 4, 1, 1);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, br#"{"epochs": 1, "bogus_knob": 7}"#).unwrap();
    let out = cli()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_seed_matches_flag_seed_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, 8, 1, 2);
    let train = |out_dir: &Path, extra: &dyn Fn(&mut Command)| {
        let mut cmd = cli();
        cmd.args(["train", "--epochs", "2", "--batch-size", "4"])
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(out_dir);
        extra(&mut cmd);
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(out_dir.join("final.ckpt")).unwrap()
    };
    let via_flag = train(&dir.path().join("a"), &|c| {
        c.arg("--seed").arg("5");
    });
    let via_env = train(&dir.path().join("b"), &|c| {
        c.env("ACM_SEED", "5");
    });
    assert_eq!(via_flag, via_env, "ACM_SEED must behave like --seed");
    // a flag overrides the env var
    let flag_wins = train(&dir.path().join("c"), &|c| {
        c.env("ACM_SEED", "9").arg("--seed").arg("5");
    });
    assert_eq!(via_flag, flag_wins, "--seed must take precedence over ACM_SEED");
}

#[test]
fn eval_self_retrieval_and_window_monotonicity() {
    let dir = tempfile::tempdir().unwrap();
    let self_data = dir.path().join("self");
    let two_cond = dir.path().join("two");
    generate(&self_data, 15, 1, 4);
    generate(&two_cond, 15, 2, 4);
    let ckpt = dir.path().join("ckpt");
    let out = cli()
        .args(["train", "--seed", "1", "--epochs", "2", "--batch-size", "8"])
        .arg("--data")
        .arg(&two_cond)
        .arg("--out")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let final_ckpt = ckpt.join("final.ckpt");

    let eval = |data: &Path, window: &str, report: &Path| -> serde_json::Value {
        let out = cli()
            .args(["eval", "--window", window])
            .arg("--checkpoint")
            .arg(&final_ckpt)
            .arg("--data")
            .arg(data)
            .arg("--out")
            .arg(report)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&std::fs::read(report).unwrap()).unwrap()
    };

    // queries == references: top hit is the query itself
    let self_report = eval(&self_data, "0", &dir.path().join("self.json"));
    assert_eq!(self_report["recall"]["1"].as_f64().unwrap(), 1.0);

    // widening the tolerance window cannot lower recall
    let w0 = eval(&two_cond, "0", &dir.path().join("w0.json"));
    let w2 = eval(&two_cond, "2", &dir.path().join("w2.json"));
    for n in ["1", "5", "10"] {
        assert!(
            w0["recall"][n].as_f64().unwrap() <= w2["recall"][n].as_f64().unwrap(),
            "recall@{n} decreased when widening the window"
        );
    }
}
