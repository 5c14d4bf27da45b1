use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn affectmtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_affectmtl")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.display().to_string()
}

/// A small generated dataset with a training config next to it.
fn setup(tmp: &Path) -> String {
    let synth = write(
        &tmp.join("synth.json"),
        r#"{"n": 450, "feature_dim": 10, "test_n": 90, "corpus_n": 300, "seed": 2}"#,
    );
    let data = tmp.join("data").display().to_string();
    let o = affectmtl(&["generate", "--config", &synth, "--out", &data]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    write(
        &tmp.join("data/small.json"),
        r#"{
            "datasets": {"train": ["va.csv", "expr.csv", "au.csv"], "test": "test.csv"},
            "model": {"trunk_widths": [12]},
            "train": {"epochs": 2, "coupling": "soft_co_annotation"}
        }"#,
    )
}

#[test]
fn full_workflow_exits_zero() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let cfg = setup(t);
    let run = t.join("run").display().to_string();
    let o = affectmtl(&["train", "--config", &cfg, "--out", &run]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = t.join("run/model.ckpt").display().to_string();
    let test = t.join("data/test.csv").display().to_string();

    let o = affectmtl(&["eval", "--checkpoint", &ckpt, "--data", &test, "--tasks", "expr,au", "--out", &t.join("eval").display().to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["va"].is_null());
    assert!(report["expr"]["accuracy"].is_number());

    let o = affectmtl(&["zero-shot", "--checkpoint", &ckpt, "--data", &test, "--out", &t.join("zs").display().to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(t.join("zs/predictions.csv").is_file());

    let corpus = t.join("data/corpus.csv").display().to_string();
    let o = affectmtl(&["infer", "--corpus", &corpus, "--out", &t.join("infer").display().to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(t.join("infer/relatedness.json").is_file());

    let o = affectmtl(&["gradcheck", "--out", &t.join("gc").display().to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max rel error"));
}

#[test]
fn seed_flag_overrides_config_and_runs_repeat_exactly() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let cfg = setup(t);
    let mut steps = Vec::new();
    for (name, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let out = t.join(name).display().to_string();
        let o = affectmtl(&["train", "--config", &cfg, "--seed", seed, "--out", &out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(t.join(name).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["seed"].as_u64(), Some(seed.parse().unwrap()));
        steps.push(std::fs::read(t.join(name).join("steps.csv")).unwrap());
    }
    assert_eq!(steps[0], steps[1]);
    assert_ne!(steps[0], steps[2]);
}

#[test]
fn missing_config_exits_one() {
    let o = affectmtl(&["train", "--config", "/nonexistent/experiment.json"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&affectmtl(&["frobnicate"])), 1);
    assert_eq!(code(&affectmtl(&["train"])), 1);
    assert_eq!(code(&affectmtl(&["eval", "--data", "x.csv"])), 1);
    assert_eq!(code(&affectmtl(&["--help"])), 0);
}

#[test]
fn invalid_coupling_mode_exits_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        &tmp.path().join("bad.json"),
        r#"{"datasets": {"train": ["va.csv"]}, "train": {"coupling": "telepathy"}}"#,
    );
    let o = affectmtl(&["train", "--config", &cfg, "--out", &tmp.path().join("run").display().to_string()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_two_and_names_it() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp.path().join("exp.json"), r#"{"datasets": {"train": ["absent.csv"]}}"#);
    let o = affectmtl(&["train", "--config", &cfg, "--out", &tmp.path().join("run").display().to_string()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("absent.csv"), "{}", stderr(&o));
}

#[test]
fn empty_profile_file_exits_one() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let cfg = setup(t);
    let run = t.join("run").display().to_string();
    assert_eq!(code(&affectmtl(&["train", "--config", &cfg, "--out", &run])), 0);
    let profiles = write(&t.join("profiles.json"), "[]");
    let o = affectmtl(&[
        "zero-shot",
        "--checkpoint",
        &t.join("run/model.ckpt").display().to_string(),
        "--data",
        &t.join("data/test.csv").display().to_string(),
        "--profiles",
        &profiles,
        "--out",
        &t.join("zs").display().to_string(),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn failed_gradient_check_exits_three() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp.path().join("gc.json"), r#"{"modes": ["none"], "threshold": 1e-15}"#);
    let o = affectmtl(&["gradcheck", "--config", &cfg]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
