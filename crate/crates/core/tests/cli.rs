//! End-to-end checks of the command-line interface: determinism of the
//! written artifacts, exit codes, and file-format contracts.

use std::fs;
use std::path::Path;
use std::process::Command;

fn coact() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coact"))
}

fn smoke_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("smoke.json");
    fs::write(
        &path,
        r#"{
  "model": {
    "frames": 4, "grid_w": 2, "grid_h": 2, "channels": 4,
    "clusters": 2, "activities": 2, "proj_dim": 4,
    "dropout_rate": 0.1, "base_lr": 0.01, "epochs": 15, "seed": 7
  },
  "synth": {
    "samples": 24, "frames": 4, "grid_w": 2, "grid_h": 2, "channels": 4,
    "activities": 2, "base_prob": [0.5, 0.5], "signature_scale": [1.0, 1.0],
    "cells": [[0, 0], [1, 1]], "windows": [[0, 2], [2, 2]],
    "co_occurrence": [[1.0, 0.0], [0.0, 1.0]], "noise_sigma": 0.1
  }
}"#,
    )
    .unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn synth_is_byte_identical_per_seed_and_writes_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let config = smoke_config(tmp.path());
    for out in ["a", "b"] {
        let status = coact()
            .args(["synth", "--config"])
            .arg(&config)
            .args(["--seed", "5", "--out"])
            .arg(tmp.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = dir_bytes(&tmp.path().join("a"));
    let b = dir_bytes(&tmp.path().join("b"));
    assert_eq!(a, b);

    // 24 samples, a labels CSV with 2 columns, and the echoed config.
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".tnsr")).count(), 24);
    assert!(names.contains(&"labels.csv"));
    assert!(names.contains(&"config.json"));
    let labels = fs::read_to_string(tmp.path().join("a/labels.csv")).unwrap();
    for line in labels.lines() {
        assert_eq!(line.split(',').count(), 2);
    }

    // Refuses to overwrite without --force.
    let status = coact()
        .args(["synth", "--config"])
        .arg(&config)
        .args(["--seed", "5", "--out"])
        .arg(tmp.path().join("a"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn train_reruns_are_byte_identical_and_eval_reads_them_back() {
    let tmp = tempfile::tempdir().unwrap();
    let config = smoke_config(tmp.path());
    let data = tmp.path().join("data");
    assert!(coact()
        .args(["synth", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    for run in ["r1", "r2"] {
        let status = coact()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(tmp.path().join(run))
            .status()
            .unwrap();
        assert!(status.success());
    }
    for file in ["params.json", "metrics.json", "train_log.csv", "config.json"] {
        let a = fs::read(tmp.path().join("r1").join(file)).unwrap();
        let b = fs::read(tmp.path().join("r2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }

    // The training loss went down.
    let log = fs::read_to_string(tmp.path().join("r1/train_log.csv")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(losses.last().unwrap() < losses.first().unwrap());

    // Metrics JSON carries exactly the fixed keys.
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("r1/metrics.json")).unwrap())
            .unwrap();
    let mut keys: Vec<&str> = metrics.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    let mut expected = vec![
        "per_label_accuracy",
        "precision_micro",
        "recall_micro",
        "f1_micro",
        "precision_macro",
        "recall_macro",
        "f1_macro",
        "map",
        "excluded_classes",
    ];
    expected.sort_unstable();
    assert_eq!(keys, expected);

    let output = coact()
        .args(["eval", "--params"])
        .arg(tmp.path().join("r1/params.json"))
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("f1_micro"));

    // Export writes A spatial maps (+PGMs), 2A temporal grids, 2 mask
    // files and the echoed config.
    let export = tmp.path().join("export");
    let status = coact()
        .args(["export", "--params"])
        .arg(tmp.path().join("r1/params.json"))
        .arg("--sample")
        .arg(data.join("sample_00000.tnsr"))
        .arg("--out")
        .arg(&export)
        .status()
        .unwrap();
    assert!(status.success());
    let names: Vec<String> = dir_bytes(&export).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with("map.txt")).count(), 2);
    assert_eq!(names.iter().filter(|n| n.ends_with("map.pgm")).count(), 2);
    assert_eq!(
        names
            .iter()
            .filter(|n| n.starts_with("temporal_attention"))
            .count(),
        4
    );
    assert_eq!(
        names
            .iter()
            .filter(|n| n.starts_with("association_mask"))
            .count(),
        2
    );
    assert!(names.contains(&"config.json".to_string()));

    // Every exported temporal grid row sums to 1.
    for name in names.iter().filter(|n| n.starts_with("temporal_attention")) {
        let text = fs::read_to_string(export.join(name)).unwrap();
        for line in text.lines() {
            let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-9, "{name}: row sums to {sum}");
        }
    }

    // The exported masks are exactly the ones counted from the training
    // labels.
    let labels: Vec<Vec<u8>> = fs::read_to_string(data.join("labels.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let rebuilt = coact::decoder::build_assoc_masks(&labels, 2).unwrap();
    let exported = fs::read_to_string(export.join("association_mask_positive.csv")).unwrap();
    let values: Vec<f64> = exported
        .lines()
        .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()))
        .collect();
    for (a, b) in values.iter().zip(rebuilt.positive.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn bundled_smoke_config_trains_end_to_end() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(coact()
        .args(["synth", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let run = tmp.path().join("run");
    let status = coact()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    for key in [
        "per_label_accuracy",
        "precision_micro",
        "recall_micro",
        "f1_micro",
        "precision_macro",
        "recall_macro",
        "f1_macro",
        "map",
        "excluded_classes",
    ] {
        assert!(metrics.get(key).is_some(), "missing key {key}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(losses.last().unwrap() < losses.first().unwrap());
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown config key: 1, and the message names it.
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"fames": 4}}"#).unwrap();
    let out = coact()
        .args(["macc", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fames"));

    // Usage error: 1. Help: 0.
    let out = coact().args(["no-such-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = coact().args(["--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));

    // Gradcheck on the tiny default config: 0, one line per group.
    let out = coact().args(["gradcheck", "--seed", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("group ")).count(), 12);

    // Deliberately corrupted backward: 2.
    let out = coact()
        .args(["gradcheck", "--seed", "1", "--corrupt-group", "alpha"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
