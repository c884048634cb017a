use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pal_core::io::{read_mask, write_mask};
use pal_core::BinaryMask;
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{"n_train": 24, "n_test": 6, "total_epochs": 10, "seed": 5}"#;

fn pal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pal")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path and contents of every file below `root` except meta.json.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "meta.json" {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn generate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(pal(&["generate", "--config", &cfg, "--out", s(&a)]).status.code(), Some(0));
    assert_eq!(pal(&["generate", "--config", &cfg, "--out", s(&b)]).status.code(), Some(0));
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    assert!(a.join("meta.json").is_file());

    let labels = json(&a.join("labels.json"));
    assert_eq!(labels["samples"].as_array().unwrap().len(), 24);
    assert_eq!(json(&a.join("test/labels.json"))["samples"].as_array().unwrap().len(), 6);
    assert!(a.join("images/000000.png").is_file());
    assert!(a.join("gt_masks/000023.png").is_file());
    assert!(a.join("test/images/000024.png").is_file());
}

#[test]
fn all_easy_config_has_no_hard_samples() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"n_train": 10, "n_test": 2, "easy_frac": 1.0}"#);
    let out = tmp.path().join("ds");
    assert_eq!(pal(&["generate", "--config", &cfg, "--out", s(&out)]).status.code(), Some(0));
    let labels = json(&out.join("labels.json"));
    let samples = labels["samples"].as_array().unwrap();
    assert!(samples.iter().all(|e| e["scene_class"] == "easy"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"lamda_decay": 0.9}"#);
    let out = pal(&["generate", "--config", &cfg, "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(4));
    let err = error_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("lamda_decay"));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn bad_flags_are_usage_errors() {
    let out = pal(&["train", "--out", "/nonexistent", "--mode", "nope"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_dataset_aborts() {
    let tmp = TempDir::new().unwrap();
    let out = pal(&[
        "train",
        "--dataset",
        s(&tmp.path().join("none")),
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "aborted");
}

fn train(tmp: &Path, cfg: &str, ds: &Path, name: &str, extra: &[&str]) -> (PathBuf, Option<i32>) {
    let out = tmp.join(name);
    let mut args = vec!["train", "--config", cfg, "--dataset", s(ds), "--out", s(&out)];
    args.extend_from_slice(extra);
    let res = pal(&args);
    (out, res.status.code())
}

#[test]
fn train_eval_plot_round_trip() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL);
    let ds = tmp.path().join("ds");
    assert_eq!(pal(&["generate", "--config", &cfg, "--out", s(&ds)]).status.code(), Some(0));

    let (run, code) = train(tmp.path(), &cfg, &ds, "run", &["--dump-epg", "--snapshot-every", "8"]);
    let report = json(&run.join("report.json"));
    let valid = report["final_metrics"]["valid"].as_bool().unwrap();
    assert_eq!(code, Some(if valid { 0 } else { 2 }));
    for f in ["metrics.csv", "model.palw", "meta.json", "epg/summary.json", "epg/000000.png"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,phase,iou,niou,pd,fa,valid,pool_train,pool_prep,label_iou_gt"));
    assert_eq!(csv.lines().count(), 11);
    let snaps: Vec<_> = fs::read_dir(run.join("snapshots")).unwrap().collect();
    assert!(!snaps.is_empty());

    // saved predictions re-scored from disk match the report
    let metrics_path = tmp.path().join("m.json");
    let ev = pal(&[
        "eval",
        "--pred",
        s(&run.join("predictions")),
        "--gt",
        s(&ds.join("test/gt_masks")),
        "--out",
        s(&metrics_path),
    ]);
    assert_eq!(ev.status.code(), code);
    assert_eq!(json(&metrics_path), report["final_metrics"]);

    // same config and seed reproduce the report byte for byte
    let (again, _) = train(tmp.path(), &cfg, &ds, "again", &["--snapshot-every", "0"]);
    assert_eq!(fs::read(run.join("report.json")).unwrap(), fs::read(again.join("report.json")).unwrap());
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());
    assert!(!again.join("snapshots").exists());

    let plots = tmp.path().join("plots");
    assert_eq!(pal(&["plot", "--report", s(&run.join("report.json")), "--out", s(&plots)]).status.code(), Some(0));
    for f in ["iou.svg", "pools.svg", "label_quality.svg"] {
        let svg = fs::read_to_string(plots.join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{f}");
        assert_eq!(svg.matches("<svg").count(), 1);
        assert!(!svg.contains("NaN"));
    }

    // single-epoch report still plots
    let mut one = report.clone();
    one["epochs"].as_array_mut().unwrap().truncate(1);
    let one_path = write(tmp.path(), "one.json", &one.to_string());
    let out = tmp.path().join("one");
    assert_eq!(pal(&["plot", "--report", &one_path, "--out", s(&out)]).status.code(), Some(0));
    assert!(out.join("iou.svg").is_file());
}

#[test]
fn eval_identical_and_empty_predictions() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"n_train": 4, "n_test": 4}"#);
    let ds = tmp.path().join("ds");
    assert_eq!(pal(&["generate", "--config", &cfg, "--out", s(&ds)]).status.code(), Some(0));
    let gt = ds.join("gt_masks");

    let same = pal(&["eval", "--pred", s(&gt), "--gt", s(&gt)]);
    assert_eq!(same.status.code(), Some(0));
    let m: Value = serde_json::from_slice(&same.stdout).unwrap();
    assert_eq!((m["iou"].as_f64(), m["fa"].as_f64(), m["valid"].as_bool()), (Some(1.0), Some(0.0), Some(true)));

    // all-background masks with the same names
    let blank = tmp.path().join("blank");
    fs::create_dir_all(&blank).unwrap();
    for e in fs::read_dir(&gt).unwrap() {
        let p = e.unwrap().path();
        let (h, w) = read_mask(&p).unwrap().dims();
        write_mask(blank.join(p.file_name().unwrap()), &BinaryMask::new(h, w)).unwrap();
    }
    let out = pal(&["eval", "--pred", s(&blank), "--gt", s(&gt)]);
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((m["iou"].as_f64(), m["pd"].as_f64()), (Some(0.0), Some(0.0)));
}

#[test]
fn eval_mismatched_file_sets() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"n_train": 3, "n_test": 1}"#);
    let ds = tmp.path().join("ds");
    assert_eq!(pal(&["generate", "--config", &cfg, "--out", s(&ds)]).status.code(), Some(0));
    let pred = tmp.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    fs::copy(ds.join("gt_masks/000000.png"), pred.join("000000.png")).unwrap();
    fs::copy(ds.join("gt_masks/000001.png"), pred.join("000009.png")).unwrap();
    let out = pal(&["eval", "--pred", s(&pred), "--gt", s(&ds.join("gt_masks"))]);
    assert_eq!(out.status.code(), Some(3));
    let msg = error_json(&out)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("000009.png") && msg.contains("000001.png") && msg.contains("000002.png"), "{msg}");
}
