//! Heterogeneous samples and the label-side coupling operations:
//! co-annotation in both directions, soft co-annotation, VA/expression
//! consistency cleaning and frame subsampling.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relatedness::{RelatednessTable, ANGER, DISGUST, FEAR, HAPPINESS, NEUTRAL, SADNESS};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceKey {
    pub video: String,
    pub frame: u64,
}

/// One training/evaluation sample with whatever labels its source provides.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeterogeneousSample {
    pub id: String,
    pub features: Vec<f64>,
    /// `(valence, arousal)`, each in `[-1, 1]`.
    pub va: Option<[f64; 2]>,
    pub expr: Option<usize>,
    /// Per-AU annotation; `None` entries are unannotated.
    pub au: Option<Vec<Option<bool>>>,
    /// Per-AU loss weights, defined exactly where `au` is annotated.
    pub au_weights: Option<Vec<Option<f64>>>,
    pub sequence_key: Option<SequenceKey>,
    /// Compound-expression ground truth, used only for zero-shot scoring.
    pub compound: Option<usize>,
}

impl HeterogeneousSample {
    pub fn validate(&self) -> Result<()> {
        if self.va.is_none() && self.expr.is_none() && self.au.is_none() && self.compound.is_none() {
            return Err(Error::Data(format!("sample `{}` carries no label", self.id)));
        }
        if let Some([v, a]) = self.va {
            if !(-1.0..=1.0).contains(&v) || !(-1.0..=1.0).contains(&a) {
                return Err(Error::Data(format!(
                    "sample `{}` has VA ({v}, {a}) outside [-1, 1]",
                    self.id
                )));
            }
        }
        if let Some(w) = &self.au_weights {
            let au = self.au.as_ref().ok_or_else(|| {
                Error::Data(format!("sample `{}` has AU weights without AU labels", self.id))
            })?;
            if w.len() != au.len() {
                return Err(Error::Data(format!("sample `{}` AU weight length", self.id)));
            }
            for (y, w) in au.iter().zip(w) {
                match (y, w) {
                    (Some(_), Some(w)) if *w > 0.0 && *w <= 1.0 => {}
                    (None, None) => {}
                    _ => {
                        return Err(Error::Data(format!(
                            "sample `{}` AU weights must be in (0, 1] exactly where AUs are annotated",
                            self.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn annotated_au_count(&self) -> usize {
        self.au
            .as_ref()
            .map_or(0, |a| a.iter().filter(|y| y.is_some()).count())
    }
}

/// Fills the expression's related AUs as active targets.
///
/// Prototypical AUs get loss weight 1, observational AUs their table weight.
/// AUs the sample already annotates are left as they are, so the operation is
/// idempotent. Samples without an expression, or whose expression has no
/// related AUs, come back unchanged.
pub fn co_annotate_emotion_to_aus(
    sample: &HeterogeneousSample,
    table: &RelatednessTable,
) -> HeterogeneousSample {
    let mut out = sample.clone();
    let Some(expr) = sample.expr else {
        return out;
    };
    let entries = match table.lookup(expr) {
        Ok(e) if !e.is_empty() => e,
        _ => return out,
    };
    let n = table.num_labels();
    let mut au = sample.au.clone().unwrap_or_else(|| vec![None; n]);
    let mut weights = sample.au_weights.clone().unwrap_or_else(|| {
        au.iter().map(|y| y.map(|_| 1.0)).collect()
    });
    for e in entries {
        if au[e.label].is_none() {
            au[e.label] = Some(true);
            weights[e.label] = Some(e.weight);
        }
    }
    out.au = Some(au);
    out.au_weights = Some(weights);
    out
}

/// Assigns an expression to an AU-annotated sample when some emotion has all
/// of its related AUs annotated active.
///
/// Among fully covered emotions the one with the most required AUs wins,
/// ties going to the lowest class index. Samples that already carry an
/// expression are returned unchanged.
pub fn co_annotate_aus_to_emotion(
    sample: &HeterogeneousSample,
    table: &RelatednessTable,
) -> HeterogeneousSample {
    let mut out = sample.clone();
    if sample.expr.is_some() {
        return out;
    }
    let Some(au) = &sample.au else {
        return out;
    };
    let mut best: Option<(usize, usize)> = None;
    for class in 0..table.num_classes() {
        let entries = table.lookup(class).expect("class in range");
        if entries.is_empty() {
            continue;
        }
        let covered = entries
            .iter()
            .all(|e| au.get(e.label).copied().flatten() == Some(true));
        if covered && best.is_none_or(|(_, n)| entries.len() > n) {
            best = Some((class, entries.len()));
        }
    }
    if let Some((class, _)) = best {
        out.expr = Some(class);
    }
    out
}

/// Soft emotion label derived from AU annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionSoftLabel {
    pub indicator_scores: Vec<f64>,
    pub q: Vec<f64>,
}

impl EmotionSoftLabel {
    pub fn from_indicators(indicator_scores: Vec<f64>) -> Self {
        let q = softmax(&indicator_scores);
        Self {
            indicator_scores,
            q,
        }
    }

    /// Checks that `q` is the softmax of the indicator scores.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let expect = softmax(&self.indicator_scores);
        expect.len() == self.q.len()
            && expect.iter().zip(&self.q).all(|(a, b)| (a - b).abs() <= tol)
    }
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Indicator score per class (weighted fraction of its related AUs that are
/// active, unannotated AUs counting as inactive) turned into a distribution
/// with a softmax. Classes without related AUs score 0. Returns `None` for a
/// sample without AU annotations.
pub fn soft_co_annotate(
    sample: &HeterogeneousSample,
    table: &RelatednessTable,
    reweight_observational: bool,
) -> Option<EmotionSoftLabel> {
    let au = sample.au.as_ref()?;
    let scores = (0..table.num_classes())
        .map(|class| {
            let entries = table.lookup(class).expect("class in range");
            let (num, den) = entries.iter().fold((0.0, 0.0), |(num, den), e| {
                let w = table.coupling_weight(e, reweight_observational);
                let y = if au.get(e.label).copied().flatten() == Some(true) {
                    1.0
                } else {
                    0.0
                };
                (num + w * y, den + w)
            });
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect();
    Some(EmotionSoftLabel::from_indicators(scores))
}

/// Whether a VA annotation is consistent with the expression label.
pub fn va_consistent(expr: usize, va: [f64; 2]) -> bool {
    let [v, a] = va;
    match expr {
        NEUTRAL => v.hypot(a) < 0.15,
        SADNESS | DISGUST | FEAR => v < 0.0,
        ANGER => v < 0.0 && a > 0.0,
        HAPPINESS => v > 0.0,
        _ => true,
    }
}

/// Splits samples into those kept and those whose VA contradicts their
/// expression. Samples lacking either label are always kept.
pub fn clean_va_expr(
    samples: Vec<HeterogeneousSample>,
) -> (Vec<HeterogeneousSample>, Vec<HeterogeneousSample>) {
    samples.into_iter().partition(|s| match (s.expr, s.va) {
        (Some(e), Some(va)) => va_consistent(e, va),
        _ => true,
    })
}

pub const SUBSAMPLE_STRIDE: usize = 5;

/// Keeps every fifth frame of each video (positions 0, 5, 10, ... after
/// sorting by frame index).
pub fn subsample_frames(samples: Vec<HeterogeneousSample>) -> Vec<HeterogeneousSample> {
    subsample_frames_every(samples, SUBSAMPLE_STRIDE)
}

/// Output is grouped per video in order of first appearance, frames sorted;
/// samples without a sequence key are appended unchanged.
pub fn subsample_frames_every(
    samples: Vec<HeterogeneousSample>,
    stride: usize,
) -> Vec<HeterogeneousSample> {
    assert!(stride >= 1, "stride must be positive");
    let mut order: Vec<String> = Vec::new();
    let mut videos: HashMap<String, Vec<HeterogeneousSample>> = HashMap::new();
    let mut unkeyed = Vec::new();
    for s in samples {
        match &s.sequence_key {
            Some(key) => {
                if !videos.contains_key(&key.video) {
                    order.push(key.video.clone());
                }
                videos.entry(key.video.clone()).or_default().push(s);
            }
            None => unkeyed.push(s),
        }
    }
    let mut out = Vec::new();
    for video in order {
        let mut frames = videos.remove(&video).expect("video recorded");
        frames.sort_by_key(|s| s.sequence_key.as_ref().map(|k| k.frame));
        out.extend(frames.into_iter().step_by(stride));
    }
    out.extend(unkeyed);
    out
}
