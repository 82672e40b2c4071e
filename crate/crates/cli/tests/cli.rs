use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmil::evaluation::EvalSplit;
use cmil::models::{load_checkpoint, CmilModel};
use cmil::training::{read_log_csv, read_trial_table};
use serde_json::Value;

fn cmil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmil"))
        .args(args)
        .current_dir(dir)
        .env("CMIL_LOG_LEVEL", "error")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cmil(dir, args);
    assert!(
        out.status.success(),
        "cmil {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(dir: &Path, args: &[&str]) -> String {
    let out = cmil(dir, args);
    assert!(!out.status.success(), "cmil {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

/// Small synthetic dataset plus a weakly labeled manifest at 50% noise.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "synth",
            "--identities",
            "4",
            "--crops-per-identity",
            "12",
            "--bags-per-identity",
            "3",
            "--val-identities",
            "4",
            "--test-identities",
            "4",
            "--out",
            "data",
        ],
    );
    ok(d, &["generate", "--input", "data/train.json", "--dup-factor", "1", "--out", "weak"]);
    dir
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let body = format!(
        r#"{{"paths.train": "weak/manifest.json", "paths.val": "data/val.json",
            "extractor.input_shape": [32], "extractor.hidden_sizes": [],
            "extractor.embed_dim": 8, "accumulator.kind": "mean",
            "bag_size": 3, "batch_size": 4{extra}}}"#
    );
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn generate_snaps_noise_to_duplication_factor() {
    let dir = workspace();
    let out = ok(dir.path(), &["generate", "--input", "data/train.json", "--noise", "0.66", "--out", "g"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["duplication_factor"], 2);
    assert!(dir.path().join("g/manifest.json").exists());
}

#[test]
fn generate_rejects_unreachable_noise() {
    let dir = workspace();
    let e = err(dir.path(), &["generate", "--input", "data/train.json", "--noise", "0.6", "--out", "g"]);
    assert!(e.contains("k/(k+1)"), "{e}");
    assert!(!dir.path().join("g/manifest.json").exists());
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let dir = workspace();
    write_config(dir.path(), "c.json", r#", "epochs": 0, "seed": 9"#);
    ok(dir.path(), &["train", "--config", "c.json", "--out", "run"]);
    let ckpt = load_checkpoint(dir.path().join("run/best.ckpt.json")).unwrap();
    let init = CmilModel::new(ckpt.extractor.clone(), ckpt.accumulator, ckpt.labels.len(), 9).unwrap();
    assert_eq!(ckpt.params, init.params);
    assert!(read_log_csv(dir.path().join("run/log.csv")).unwrap().is_empty());
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = workspace();
    write_config(dir.path(), "c.json", r#", "epochs": 2, "seed": 4"#);
    ok(dir.path(), &["train", "--config", "c.json", "--out", "a"]);
    ok(dir.path(), &["train", "--config", "c.json", "--out", "b"]);
    let strip = |p: &str| {
        let mut rows = read_log_csv(dir.path().join(p)).unwrap();
        rows.iter_mut().for_each(|r| r.wall_time = 0.0);
        rows
    };
    let a = strip("a/log.csv");
    assert!(!a.is_empty());
    assert_eq!(a, strip("b/log.csv"));
    let ca = std::fs::read(dir.path().join("a/best.ckpt.json")).unwrap();
    assert_eq!(ca, std::fs::read(dir.path().join("b/best.ckpt.json")).unwrap());
}

#[test]
fn published_hyperparameter_names_are_accepted() {
    let dir = workspace();
    write_config(
        dir.path(),
        "c.json",
        r#", "distance": "cosine", "fixbase": 1, "lr": 0.001, "margin": 0.5,
           "feature_norm": true, "alpha": 0.7, "beta": 0.3, "gamma": 0.01, "epochs": 1"#,
    );
    ok(dir.path(), &["train", "--config", "c.json", "--out", "run"]);
    let saved: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/config.json")).unwrap()).unwrap();
    assert_eq!(saved["learning_rate"], 0.001);
    assert_eq!(saved["losses.m_triplet"], 0.5);
    assert_eq!(saved["losses.m_align"], 0.5);
    assert_eq!(saved["extractor.feature_norm"], true);
}

#[test]
fn unknown_config_key_fails_before_training() {
    let dir = workspace();
    write_config(dir.path(), "c.json", r#", "learnin_rate": 0.1"#);
    let e = err(dir.path(), &["train", "--config", "c.json", "--out", "run"]);
    assert!(e.contains("learnin_rate"), "{e}");
    assert!(!dir.path().join("run/log.csv").exists());
}

#[test]
fn eval_with_a_single_query() {
    let dir = workspace();
    write_config(dir.path(), "c.json", r#", "epochs": 1"#);
    ok(dir.path(), &["train", "--config", "c.json", "--out", "run"]);
    let mut split = EvalSplit::load(dir.path().join("data/test.json")).unwrap();
    split.queries.truncate(1);
    split.save(dir.path().join("one.json")).unwrap();
    let out = ok(
        dir.path(),
        &["eval", "--checkpoint", "run/best.ckpt.json", "--split", "one.json", "--out", "ev"],
    );
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["num_queries"], 1);
    let r1 = v["rank1"].as_f64().unwrap();
    assert!(r1 == 0.0 || r1 == 1.0);
    assert!(dir.path().join("ev/eval_report.json").exists());
}

#[test]
fn sweep_with_budget_one_has_one_trial() {
    let dir = workspace();
    write_config(dir.path(), "c.json", "");
    ok(dir.path(), &["sweep", "--config", "c.json", "--budget", "1", "--out", "sw"]);
    let trials = read_trial_table(dir.path().join("sw/trials.csv")).unwrap();
    assert_eq!(trials.len(), 1);
    assert_eq!(trials[0].epochs, 3);
    assert!(dir.path().join("sw/best_config.json").exists());
}

#[test]
fn sweep_requires_validation_split() {
    let dir = workspace();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"paths.train": "weak/manifest.json", "extractor.input_shape": [32]}"#).unwrap();
    let e = err(dir.path(), &["sweep", "--config", "c.json", "--budget", "1", "--out", "sw"]);
    assert!(e.contains("paths.val"), "{e}");
}

#[test]
fn report_series_and_comparison() {
    let dir = workspace();
    write_config(dir.path(), "c.json", r#", "epochs": 3, "early_stop_patience": 0"#);
    ok(dir.path(), &["train", "--config", "c.json", "--out", "a"]);
    ok(dir.path(), &["train", "--config", "c.json", "--out", "b", "--baseline"]);

    ok(dir.path(), &["report", "--log", "a/log.csv", "--out", "r1"]);
    let series = std::fs::read_to_string(dir.path().join("r1/series.csv")).unwrap();
    assert_eq!(series.lines().count(), 1 + 3);
    assert!(dir.path().join("r1/plot.svg").exists());
    assert!(!dir.path().join("r1/comparison.csv").exists());

    ok(
        dir.path(),
        &["report", "--log", "cmil=a/log.csv", "--log", "crop=b/log.csv", "--out", "r2"],
    );
    let cmp = std::fs::read_to_string(dir.path().join("r2/comparison.csv")).unwrap();
    let lines: Vec<&str> = cmp.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("cmil,") && lines[2].starts_with("crop,"));
    assert!(dir.path().join("r2/series_cmil.csv").exists());
    assert!(dir.path().join("r2/plot_crop.svg").exists());
}

#[test]
fn missing_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let e = err(dir.path(), &["generate", "--input", "nope.json", "--noise", "0.5", "--out", "g"]);
    assert!(e.starts_with("error:"), "{e}");
}
