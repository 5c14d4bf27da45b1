use affectmtl::labels::HeterogeneousSample;
use affectmtl::losses::Task;
use affectmtl::model::{ModelSpec, MultiHeadModel, DEFAULT_TRUNK};
use affectmtl::objective::CouplingMode;
use affectmtl::relatedness::{RelatednessTable, NUM_EMOTIONS};
use affectmtl::train::{train, TrainSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seven classes, one input direction each, shifted by 2 over uniform
/// jitter of half-width 0.5: separable by the argmax of the first seven
/// coordinates.
fn separable(n: usize, seed: u64) -> Vec<HeterogeneousSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = i % NUM_EMOTIONS;
            let mut f: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
            f[c] += 2.0;
            HeterogeneousSample {
                id: i.to_string(),
                features: f,
                expr: Some(c),
                ..Default::default()
            }
        })
        .collect()
}

#[test]
fn cross_entropy_drops_below_a_tenth_within_2000_steps() {
    let data = separable(256, 0);
    let table = RelatednessTable::emotion_au_domain();
    let mut model = MultiHeadModel::new(ModelSpec::affect(8, DEFAULT_TRUNK.to_vec(), 1)).unwrap();
    let settings = TrainSettings {
        coupling: CouplingMode::None,
        max_batch: 32,
        epochs: 250,
        ..TrainSettings::default()
    };
    let mut ce = Vec::new();
    train(
        &mut model,
        &[&data],
        &table,
        &settings,
        |r| {
            ce.push(r.report.task_losses[&Task::Expr]);
            Ok(())
        },
        |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(ce.len(), 2000);
    let last_epoch: f64 = ce[ce.len() - 8..].iter().sum::<f64>() / 8.0;
    assert!(last_epoch < 0.1, "final-epoch CE {last_epoch}");
}

#[test]
fn training_is_seed_deterministic_and_seed_sensitive() {
    let data = separable(100, 3);
    let table = RelatednessTable::emotion_au_domain();
    let run = |seed| {
        let mut m = MultiHeadModel::new(ModelSpec::affect(8, vec![16], 0)).unwrap();
        let s = TrainSettings {
            epochs: 2,
            max_batch: 16,
            seed,
            ..TrainSettings::default()
        };
        let mut totals = Vec::new();
        train(&mut m, &[&data], &table, &s, |r| {
            totals.push(r.report.total);
            Ok(())
        }, |_, _| Ok(()))
        .unwrap();
        (totals, m.to_checkpoint_bytes())
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5).0, run(6).0);
}

#[test]
fn va_set_smaller_than_iterations_is_rejected() {
    let table = RelatednessTable::emotion_au_domain();
    let expr = separable(64, 1);
    let va: Vec<HeterogeneousSample> = (0..3)
        .map(|i| HeterogeneousSample {
            id: format!("va{i}"),
            features: vec![0.0; 8],
            va: Some([0.1, 0.2]),
            ..Default::default()
        })
        .collect();
    let mut m = MultiHeadModel::new(ModelSpec::affect(8, vec![8], 0)).unwrap();
    let s = TrainSettings {
        max_batch: 8,
        ..TrainSettings::default()
    };
    // 8 iterations per epoch leave most VA slices with fewer than 2 rows.
    let err = train(&mut m, &[&expr, &va], &table, &s, |_| Ok(()), |_, _| Ok(())).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}
