//! Evaluation measures for expressions, AUs and valence/arousal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ccc;

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape("truth and predictions differ in length".into()));
        }
        let mut cm = Self::new(classes);
        for (t, p) in truth.iter().zip(pred) {
            cm.add(*t, *p)?;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.classes();
        for i in [truth, pred] {
            if i >= k {
                return Err(Error::IndexOutOfRange {
                    what: "class",
                    index: i,
                    len: k,
                });
            }
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn to_csv(&self) -> String {
        self.counts
            .iter()
            .map(|r| r.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    /// Recall of each class, `None` for classes absent from the ground truth.
    pub per_class_recall: Vec<Option<f64>>,
    pub uar: f64,
    pub mean_diag: f64,
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if tp == 0 || denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Accuracy, F1, UAR and the mean of the row-normalised diagonal. UAR and
/// `mean_diag` average over classes that occur in the ground truth.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix has no samples"));
    }
    let k = cm.classes();
    let trace: u64 = (0..k).map(|i| cm.counts[i][i]).sum();
    let mut per_class_f1 = Vec::with_capacity(k);
    let mut per_class_recall = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.counts[c][c];
        let row: u64 = cm.counts[c].iter().sum();
        let col: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
        per_class_f1.push(f1(tp, col - tp, row - tp));
        per_class_recall.push((row > 0).then(|| tp as f64 / row as f64));
    }
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let uar = present.iter().sum::<f64>() / present.len() as f64;
    Ok(ClassificationMetrics {
        accuracy: trace as f64 / total as f64,
        macro_f1: per_class_f1.iter().sum::<f64>() / k as f64,
        per_class_f1,
        per_class_recall,
        uar,
        mean_diag: uar,
    })
}

pub const DEFAULT_AU_THRESHOLD: f64 = 0.5;

pub fn threshold(probs: &[Vec<f64>], at: f64) -> Vec<Vec<bool>> {
    probs
        .iter()
        .map(|r| r.iter().map(|p| *p >= at).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuMetrics {
    /// `None` for AUs without any annotated entry.
    pub per_au_f1: Vec<Option<f64>>,
    pub per_au_accuracy: Vec<Option<f64>>,
    pub mean_f1: f64,
    pub mean_accuracy: f64,
    pub afa: f64,
    /// AUs left out of the means for lack of annotations.
    pub excluded: Vec<usize>,
}

/// Per-AU F1 and accuracy over annotated entries only; `afa` is the average
/// of their means.
pub fn au_metrics(predictions: &[Vec<bool>], truth: &[Vec<Option<bool>>]) -> Result<AuMetrics> {
    if predictions.len() != truth.len() {
        return Err(Error::Shape("AU predictions and truth differ in length".into()));
    }
    let labels = truth.first().map_or(0, Vec::len);
    if predictions.iter().any(|p| p.len() != labels)
        || truth.iter().any(|t| t.len() != labels)
    {
        return Err(Error::Shape("AU vectors differ in length".into()));
    }
    let mut per_au_f1 = vec![None; labels];
    let mut per_au_accuracy = vec![None; labels];
    let mut excluded = Vec::new();
    for k in 0..labels {
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (p, t) in predictions.iter().zip(truth) {
            match (t[k], p[k]) {
                (Some(true), true) => tp += 1,
                (Some(true), false) => fn_ += 1,
                (Some(false), true) => fp += 1,
                (Some(false), false) => tn += 1,
                (None, _) => {}
            }
        }
        let n = tp + fp + fn_ + tn;
        if n == 0 {
            excluded.push(k);
            continue;
        }
        per_au_f1[k] = Some(f1(tp, fp, fn_));
        per_au_accuracy[k] = Some((tp + tn) as f64 / n as f64);
    }
    let scored = labels - excluded.len();
    if scored == 0 {
        return Err(Error::Empty("no annotated AU entries"));
    }
    let mean = |v: &[Option<f64>]| v.iter().flatten().sum::<f64>() / scored as f64;
    let mean_f1 = mean(&per_au_f1);
    let mean_accuracy = mean(&per_au_accuracy);
    Ok(AuMetrics {
        per_au_f1,
        per_au_accuracy,
        mean_f1,
        mean_accuracy,
        afa: 0.5 * (mean_f1 + mean_accuracy),
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaMetrics {
    pub ccc_v: f64,
    pub ccc_a: f64,
    pub mean_ccc: f64,
}

/// Agreement of one dimension; two constant sequences score 1 when equal
/// and 0 otherwise, where the coefficient itself is undefined.
fn metric_ccc(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    let v = ccc(y, y_hat, 0.0)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Ok(if y == y_hat { 1.0 } else { 0.0 })
    }
}

pub fn va_metrics(truth: &[[f64; 2]], predictions: &[[f64; 2]]) -> Result<VaMetrics> {
    if truth.len() != predictions.len() {
        return Err(Error::Shape("VA truth and predictions differ in length".into()));
    }
    if truth.len() < 2 {
        return Err(Error::InvalidArgument("VA metrics need at least 2 frames".into()));
    }
    let col = |xs: &[[f64; 2]], d: usize| xs.iter().map(|p| p[d]).collect::<Vec<_>>();
    let ccc_v = metric_ccc(&col(truth, 0), &col(predictions, 0))?;
    let ccc_a = metric_ccc(&col(truth, 1), &col(predictions, 1))?;
    Ok(VaMetrics {
        ccc_v,
        ccc_a,
        mean_ccc: 0.5 * (ccc_v + ccc_a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix {
            counts: vec![vec![3, 0, 0], vec![0, 5, 0], vec![0, 0, 1]],
        };
        let m = classification_metrics(&cm).unwrap();
        assert_eq!((m.accuracy, m.uar, m.mean_diag, m.macro_f1), (1.0, 1.0, 1.0, 1.0));
        assert!(m.per_class_f1.iter().all(|f| *f == 1.0));
    }

    #[test]
    fn two_class_hand_example() {
        let cm = ConfusionMatrix {
            counts: vec![vec![8, 2], vec![4, 6]],
        };
        let m = classification_metrics(&cm).unwrap();
        assert_abs_diff_eq!(m.accuracy, 0.7, epsilon = 1e-15);
        assert_eq!(m.per_class_recall, vec![Some(0.8), Some(0.6)]);
        assert_abs_diff_eq!(m.uar, 0.7, epsilon = 1e-15);
        let (p, r) = (8.0 / 12.0, 8.0 / 10.0);
        assert_abs_diff_eq!(m.per_class_f1[0], 2.0 * p * r / (p + r), epsilon = 1e-12);
        assert_abs_diff_eq!(m.per_class_f1[0], 0.7273, epsilon = 1e-4);
    }

    #[test]
    fn never_predicted_class_has_zero_f1() {
        let cm = ConfusionMatrix {
            counts: vec![vec![4, 0, 0], vec![1, 3, 0], vec![0, 0, 0]],
        };
        let m = classification_metrics(&cm).unwrap();
        assert_eq!(m.per_class_f1[2], 0.0);
        assert_eq!(m.per_class_recall[2], None);
        assert!(classification_metrics(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn au_hand_example() {
        // AU0: tp 3, fp 2, fn 2, tn 13 -> F1 0.6, accuracy 0.8 over 20
        // AU1: tp 2, fp 3, fn 3, tn 7 -> F1 0.4, accuracy 0.6 over 15 annotated
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        let mut push = |t0: Option<bool>, p0: bool, t1: Option<bool>, p1: bool| {
            truth.push(vec![t0, t1]);
            pred.push(vec![p0, p1]);
        };
        let au0 = [(true, true, 3), (false, true, 2), (true, false, 2), (false, false, 13)];
        let au1 = [(true, true, 2), (false, true, 3), (true, false, 3), (false, false, 7)];
        let expand = |cells: &[(bool, bool, usize)]| {
            cells
                .iter()
                .flat_map(|&(t, p, n)| std::iter::repeat_n((t, p), n))
                .collect::<Vec<_>>()
        };
        let (a0, a1) = (expand(&au0), expand(&au1));
        for i in 0..20 {
            let (t1, p1) = a1.get(i).map_or((None, false), |&(t, p)| (Some(t), p));
            push(Some(a0[i].0), a0[i].1, t1, p1);
        }
        let m = au_metrics(&pred, &truth).unwrap();
        assert_abs_diff_eq!(m.per_au_f1[0].unwrap(), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(m.per_au_accuracy[1].unwrap(), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(m.afa, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn au_conventions() {
        let truth = vec![vec![Some(true), Some(false)], vec![Some(false), Some(true)]];
        let pred = vec![vec![true, false], vec![false, true]];
        assert_eq!(au_metrics(&pred, &truth).unwrap().afa, 1.0);
        let truth = vec![vec![Some(false)], vec![Some(false)]];
        let pred = vec![vec![false], vec![false]];
        let m = au_metrics(&pred, &truth).unwrap();
        assert_eq!((m.mean_accuracy, m.mean_f1, m.afa), (1.0, 0.0, 0.5));
        let truth = vec![vec![Some(true), None]];
        let m = au_metrics(&[vec![true, true]], &truth).unwrap();
        assert_eq!(m.excluded, vec![1]);
        assert_eq!(m.afa, 1.0);
    }

    #[test]
    fn va_cases() {
        let y = [[0.0, 0.1], [1.0, -0.3], [2.0, 0.5]];
        let m = va_metrics(&y, &y).unwrap();
        assert_eq!((m.ccc_v, m.ccc_a, m.mean_ccc), (1.0, 1.0, 1.0));
        let pred = [[0.0, 0.1], [2.0, -0.3], [4.0, 0.5]];
        let m = va_metrics(&y, &pred).unwrap();
        assert_abs_diff_eq!(m.mean_ccc, (8.0 / 13.0 + 1.0) / 2.0, epsilon = 1e-12);
        let flat = [[0.3, 0.3]; 3];
        assert_abs_diff_eq!(va_metrics(&y, &flat).unwrap().mean_ccc, 0.0, epsilon = 1e-15);
        assert!(va_metrics(&y[..1], &y[..1]).is_err());
    }

    fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
        (2usize..6).prop_flat_map(|k| {
            prop::collection::vec(prop::collection::vec(0u64..20, k), k)
                .prop_filter("nonempty", |c| c.iter().flatten().sum::<u64>() > 0)
                .prop_map(|counts| ConfusionMatrix { counts })
        })
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_permutation_invariant(cm in matrix(), rot in 0usize..6) {
            let m = classification_metrics(&cm).unwrap();
            for v in [m.accuracy, m.macro_f1, m.uar, m.mean_diag] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let k = cm.classes();
            let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
            let mut permuted = ConfusionMatrix::new(k);
            for i in 0..k {
                for j in 0..k {
                    permuted.counts[perm[i]][perm[j]] = cm.counts[i][j];
                }
            }
            let pm = classification_metrics(&permuted).unwrap();
            prop_assert!((pm.accuracy - m.accuracy).abs() < 1e-12);
            prop_assert!((pm.uar - m.uar).abs() < 1e-12);
            for i in 0..k {
                prop_assert!((pm.per_class_f1[perm[i]] - m.per_class_f1[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn uar_equals_accuracy_for_uniform_truth(k in 2usize..6, per in 1u64..10, seed: u64) {
            let mut cm = ConfusionMatrix::new(k);
            let mut state = seed;
            for t in 0..k {
                for _ in 0..per {
                    state = crate::scheduler::epoch_seed(state, 1);
                    cm.add(t, (state % k as u64) as usize).unwrap();
                }
            }
            let m = classification_metrics(&cm).unwrap();
            prop_assert!((m.uar - m.accuracy).abs() < 1e-12);
        }
    }
}
