use std::path::Path;

use affectmtl::dataset;
use affectmtl::experiment::{
    evaluate, run_eval, run_generate, run_infer, run_train, run_zero_shot, EvalConfig, ExperimentConfig, InferConfig,
    Manifest, SynthConfig, TrainRun, ZeroShotConfig,
};
use affectmtl::labels::HeterogeneousSample;
use affectmtl::losses::Task;
use affectmtl::model::MultiHeadModel;
use affectmtl::tensor::Tensor;
use tempfile::TempDir;

fn small_synth(out: &Path, frames: Option<usize>) -> SynthConfig {
    SynthConfig {
        n: 600,
        feature_dim: 12,
        test_n: 140,
        corpus_n: 400,
        frames_per_video: frames,
        seed: 4,
        out: Some(out.to_path_buf()),
        ..SynthConfig::default()
    }
}

fn generate_and_train(dir: &Path, frames: Option<usize>) -> (ExperimentConfig, TrainRun) {
    let data = dir.join("data");
    run_generate(&small_synth(&data, frames)).unwrap();
    let mut cfg = ExperimentConfig::load(&data.join("experiment.json")).unwrap();
    cfg.model.trunk_widths = vec![16];
    cfg.train.epochs = 2;
    cfg.out = Some(dir.join("run"));
    let run = run_train(&cfg).unwrap();
    (cfg, run)
}

#[test]
fn generate_train_eval_zero_shot() {
    let tmp = TempDir::new().unwrap();
    let (cfg, run) = generate_and_train(tmp.path(), None);
    for f in ["steps.csv", "model.ckpt", "relatedness.json", "manifest.json", "checkpoints/epoch_001.ckpt"] {
        assert!(run.out.join(f).is_file(), "{f}");
    }
    assert_eq!(run.epochs.len(), 2);
    let steps = std::fs::read_to_string(run.out.join("steps.csv")).unwrap();
    assert!(steps.lines().count() > 2);

    let test = cfg.datasets.test.clone().unwrap();
    let report = run_eval(&EvalConfig {
        checkpoint: run.out.join("model.ckpt"),
        data: test.clone(),
        tasks: None,
        out: Some(tmp.path().join("eval")),
    })
    .unwrap();
    assert_eq!(report.samples, 140);
    let va = report.va.as_ref().unwrap();
    assert!(va.unfiltered.mean_ccc.is_finite());
    assert!(va.filtered.is_none(), "no video keys, no filtering");
    assert!(report.expr.is_some() && report.au.is_some());
    assert!(tmp.path().join("eval/metrics.json").is_file());
    assert!(tmp.path().join("eval/confusion.csv").is_file());

    let only_expr = run_eval(&EvalConfig {
        checkpoint: run.out.join("model.ckpt"),
        data: test.clone(),
        tasks: Some(vec![Task::Expr]),
        out: Some(tmp.path().join("eval_expr")),
    })
    .unwrap();
    assert!(only_expr.va.is_none() && only_expr.au.is_none());
    assert_eq!(only_expr.expr, report.expr);

    let zs = run_zero_shot(&ZeroShotConfig {
        checkpoint: run.out.join("model.ckpt"),
        data: test.clone(),
        profiles: None,
        out: Some(tmp.path().join("zs")),
    })
    .unwrap();
    assert_eq!(zs.classes.len(), 11);
    assert_eq!(zs.predictions.len(), 140);
    assert!(zs.metrics.is_none());
    let samples = dataset::load(&test).unwrap();
    let mut rows = csv::Reader::from_path(tmp.path().join("zs/predictions.csv")).unwrap();
    let ids: Vec<String> = rows.records().map(|r| r.unwrap()[0].to_string()).collect();
    let expected: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids, expected, "predictions keep input order");
    let scores = std::fs::read_to_string(tmp.path().join("zs/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 140 * 11);
}

#[test]
fn manifests_record_config_hash_seed_and_inputs() {
    let tmp = TempDir::new().unwrap();
    let (cfg, run) = generate_and_train(tmp.path(), None);
    let m = Manifest::load(&run.out).unwrap();
    assert_eq!(m, run.manifest);
    assert_eq!(m.command, "train");
    assert_eq!(m.seed, 4);
    assert_eq!(m.config_sha256.len(), 64);
    assert_eq!(m.inputs.len(), cfg.datasets.train.len() + 1);
    assert!(m.inputs.iter().all(|i| i.sha256.len() == 64));

    // Same config elsewhere: same hash. Different seed: different hash.
    let mut moved = cfg.clone();
    moved.out = Some(tmp.path().join("run2"));
    let m2 = run_train(&moved).unwrap().manifest;
    assert_eq!(m2.config_sha256, m.config_sha256);
    let mut reseeded = moved.clone();
    reseeded.train.seed = 9;
    reseeded.out = Some(tmp.path().join("run3"));
    let m3 = run_train(&reseeded).unwrap().manifest;
    assert_eq!(m3.seed, 9);
    assert_ne!(m3.config_sha256, m.config_sha256);

    let g = Manifest::load(&tmp.path().join("data")).unwrap();
    assert_eq!(g.command, "generate");
    assert_eq!(g.seed, 4);
}

#[test]
fn video_keyed_data_reports_filtered_ccc() {
    let tmp = TempDir::new().unwrap();
    let (cfg, run) = generate_and_train(tmp.path(), Some(20));
    let samples = dataset::load(cfg.datasets.test.as_ref().unwrap()).unwrap();
    assert!(samples.iter().all(|s| s.sequence_key.is_some()));
    let (report, _) = evaluate(&run.model, &samples, None).unwrap();
    let va = report.va.unwrap();
    let filtered = va.filtered.unwrap();
    assert!(filtered.mean_ccc.is_finite());
    assert_eq!(va.median_window, Some(5));
    assert_ne!(filtered, va.unfiltered);
}

/// Labels every sample with the model's own output, so each metric must
/// be perfect.
fn self_labelled(model: &MultiHeadModel, samples: &[HeterogeneousSample]) -> Vec<HeterogeneousSample> {
    let x = Tensor::from_rows(&samples.iter().map(|s| s.features.clone()).collect::<Vec<_>>()).unwrap();
    let bundles = model.predict(&x).unwrap();
    samples
        .iter()
        .zip(bundles)
        .map(|(s, b)| {
            let mut best = 0;
            for (i, p) in b.expr_probs.iter().enumerate() {
                if *p > b.expr_probs[best] {
                    best = i;
                }
            }
            HeterogeneousSample {
                id: s.id.clone(),
                features: s.features.clone(),
                va: Some(b.va),
                expr: Some(best),
                au: Some(b.au_probs.iter().map(|p| Some(*p > 0.5)).collect()),
                ..Default::default()
            }
        })
        .collect()
}

#[test]
fn self_labelled_data_scores_perfectly() {
    let tmp = TempDir::new().unwrap();
    let (cfg, run) = generate_and_train(tmp.path(), None);
    let samples = dataset::load(cfg.datasets.test.as_ref().unwrap()).unwrap();
    let oracle = self_labelled(&run.model, &samples);
    let path = tmp.path().join("oracle.csv");
    dataset::save(&path, &oracle).unwrap();
    let report = run_eval(&EvalConfig {
        checkpoint: run.out.join("model.ckpt"),
        data: path,
        tasks: None,
        out: Some(tmp.path().join("eval")),
    })
    .unwrap();
    let va = report.va.unwrap().unfiltered;
    assert!((va.ccc_v - 1.0).abs() < 1e-9 && (va.ccc_a - 1.0).abs() < 1e-9, "{va:?}");
    let expr = report.expr.unwrap();
    assert_eq!(expr.accuracy, 1.0);
    assert_eq!(expr.uar, 1.0);
    let au = report.au.unwrap();
    assert_eq!(au.mean_accuracy, 1.0);
    for (j, f1) in au.per_au_f1.iter().enumerate() {
        let positives = oracle.iter().any(|s| s.au.as_ref().unwrap()[j] == Some(true));
        if positives {
            assert_eq!(*f1, Some(1.0), "AU index {j}");
        }
    }
}

#[test]
fn zero_shot_scores_against_profile_file_truth() {
    let tmp = TempDir::new().unwrap();
    let (cfg, run) = generate_and_train(tmp.path(), None);
    let profiles = tmp.path().join("profiles.json");
    std::fs::write(
        &profiles,
        r#"[{"name": "happily surprised", "emo1": 1, "emo2": 3, "aus": {"12": 1.0, "25": 1.0, "2": 0.8}, "positive_valence": true},
            {"name": "sadly angry", "emo1": 2, "emo2": 6, "aus": {"4": 1.0, "15": 1.0}}]"#,
    )
    .unwrap();
    let mut samples = dataset::load(cfg.datasets.test.as_ref().unwrap()).unwrap();
    for (i, s) in samples.iter_mut().enumerate() {
        s.compound = Some(i % 2);
    }
    let data = tmp.path().join("compound.csv");
    dataset::save(&data, &samples).unwrap();
    let zs = run_zero_shot(&ZeroShotConfig {
        checkpoint: run.out.join("model.ckpt"),
        data: data.clone(),
        profiles: Some(profiles.clone()),
        out: Some(tmp.path().join("zs")),
    })
    .unwrap();
    assert_eq!(zs.classes, ["happily surprised", "sadly angry"]);
    let m = zs.metrics.unwrap();
    let agree = zs.predictions.iter().enumerate().filter(|(i, p)| i % 2 == **p).count();
    assert!((m.accuracy - agree as f64 / samples.len() as f64).abs() < 1e-12);
    assert!(tmp.path().join("zs/confusion.csv").is_file());

    // Truth beyond the profile list is a data error.
    samples[0].compound = Some(5);
    dataset::save(&data, &samples).unwrap();
    let err = run_zero_shot(&ZeroShotConfig {
        checkpoint: run.out.join("model.ckpt"),
        data,
        profiles: Some(profiles),
        out: Some(tmp.path().join("zs2")),
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn empty_profile_file_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let (cfg, run) = generate_and_train(tmp.path(), None);
    let profiles = tmp.path().join("empty.json");
    std::fs::write(&profiles, "[]").unwrap();
    let err = run_zero_shot(&ZeroShotConfig {
        checkpoint: run.out.join("model.ckpt"),
        data: cfg.datasets.test.clone().unwrap(),
        profiles: Some(profiles),
        out: Some(tmp.path().join("zs")),
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

#[test]
fn missing_dataset_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    run_generate(&small_synth(&data, None)).unwrap();
    let mut cfg = ExperimentConfig::load(&data.join("experiment.json")).unwrap();
    let missing = tmp.path().join("nowhere/va.csv");
    cfg.datasets.train[0] = missing.clone();
    cfg.out = Some(tmp.path().join("run"));
    let err = run_train(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains(&missing.display().to_string()), "{err}");
}

#[test]
fn feature_width_mismatch_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let (cfg, run) = generate_and_train(tmp.path(), None);
    let mut samples = dataset::load(cfg.datasets.test.as_ref().unwrap()).unwrap();
    for s in &mut samples {
        s.features.push(0.0);
    }
    let err = evaluate(&run.model, &samples, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn inferred_table_is_usable_for_training() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    run_generate(&small_synth(&data, None)).unwrap();
    run_infer(&InferConfig {
        corpus: data.join("corpus.csv"),
        threshold: 0.1,
        out: Some(tmp.path().join("infer")),
    })
    .unwrap();
    assert!(tmp.path().join("infer/relatedness.json").is_file());

    let mut cfg = ExperimentConfig::load(&data.join("experiment.json")).unwrap();
    cfg.relatedness = serde_json::from_value(serde_json::json!({
        "source": "file",
        "path": tmp.path().join("infer/relatedness.json"),
    }))
    .unwrap();
    cfg.model.trunk_widths = vec![8];
    cfg.train.epochs = 1;
    cfg.out = Some(tmp.path().join("run"));
    let run = run_train(&cfg).unwrap();
    let saved = std::fs::read_to_string(run.out.join("relatedness.json")).unwrap();
    let reloaded: serde_json::Value = serde_json::from_str(&saved).unwrap();
    let inferred = std::fs::read_to_string(tmp.path().join("infer/relatedness.json")).unwrap();
    let original: serde_json::Value = serde_json::from_str(&inferred).unwrap();
    assert_eq!(reloaded, original);
}
