//! Empirical relatedness inference on generated corpora.

use affectmtl::relatedness::{infer_empirical, RelatednessTable, NUM_AUS, NUM_EMOTIONS};
use affectmtl::synthdata::{to_corpus, Generator, GeneratorSpec};

/// Across 40 independent 10^4-sample corpora the estimate of every related
/// pair is unbiased, and each single estimate sits within 4.5 binomial
/// standard deviations of its generating weight.
#[test]
fn empirical_weights_are_unbiased() {
    let table = RelatednessTable::emotion_au_domain();
    let runs = 40;
    let mut mean_err = vec![vec![0.0; NUM_AUS]; NUM_EMOTIONS];
    for s in 0..runs {
        let g = Generator::new(GeneratorSpec::new(8, 0.3, 1000 + s)).unwrap();
        let samples = g.draw(10_000, 2000 + s);
        let inferred = infer_empirical(&to_corpus(&samples, &table), 0.1).unwrap().table;
        for e in 1..NUM_EMOTIONS {
            let n = samples.iter().filter(|x| x.expr == Some(e)).count() as f64;
            for entry in table.lookup(e).unwrap() {
                let w = entry.weight;
                let got = inferred.entry(e, entry.label).map_or(0.0, |x| x.weight);
                let sd = (w * (1.0 - w) / n).sqrt();
                assert!((got - w).abs() <= 4.5 * sd + 1e-12, "run {s}: class {e} label {}: {got} vs {w}", entry.label);
                mean_err[e][entry.label] += (got - w) / runs as f64;
            }
        }
    }
    // Standard error of a 40-run mean is below 0.0021 for any weight.
    let worst = mean_err.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(worst < 0.0085, "mean signed error {worst}");
}

#[test]
fn unrelated_pairs_are_never_inferred() {
    let table = RelatednessTable::emotion_au_domain();
    let g = Generator::new(GeneratorSpec::new(8, 0.3, 7)).unwrap();
    let inferred = infer_empirical(&to_corpus(&g.draw(5000, 8), &table), 0.1).unwrap().table;
    for e in 0..NUM_EMOTIONS {
        for k in 0..NUM_AUS {
            if table.entry(e, k).is_none() {
                assert!(inferred.entry(e, k).is_none(), "class {e} label {k}");
            }
        }
    }
}
