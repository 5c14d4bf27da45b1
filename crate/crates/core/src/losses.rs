//! Loss terms and their gradients with respect to model outputs.
//!
//! Every `*_grad` function returns the loss value together with the
//! derivative with respect to the prediction arguments (post-activation
//! outputs: probabilities, tanh-squashed VA). Sums use Neumaier compensated
//! summation so results do not depend on how a batch happens to be ordered
//! beyond the last bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::EmotionSoftLabel;
use crate::relatedness::RelatednessTable;

pub const DEFAULT_EPSILON: f64 = 1e-7;
pub const DEFAULT_CCC_EPSILON: f64 = 1e-8;
const DISTRIBUTION_TOL: f64 = 1e-6;

/// Neumaier compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean(x: &[f64]) -> f64 {
    compensated_sum(x.iter().copied()) / x.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Va,
    Expr,
    Au,
    Id,
    Attr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    DistrMatching,
    SoftCoAnnotation,
}

/// Task and coupling-loss weights. Missing entries default to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_per_task: BTreeMap<Task, f64>,
    pub coupling_weights: BTreeMap<Coupling, f64>,
    /// Probability clamp for logarithms.
    pub epsilon: f64,
    /// Added to the CCC denominator.
    pub ccc_epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_per_task: BTreeMap::new(),
            coupling_weights: BTreeMap::new(),
            epsilon: DEFAULT_EPSILON,
            ccc_epsilon: DEFAULT_CCC_EPSILON,
        }
    }
}

impl LossWeights {
    pub fn task(&self, task: Task) -> f64 {
        self.lambda_per_task.get(&task).copied().unwrap_or(1.0)
    }

    pub fn coupling(&self, c: Coupling) -> f64 {
        self.coupling_weights.get(&c).copied().unwrap_or(1.0)
    }

    /// Sets every task and coupling weight to `value`.
    pub fn uniform(value: f64) -> Self {
        let mut w = Self::default();
        for t in [Task::Va, Task::Expr, Task::Au, Task::Id, Task::Attr] {
            w.lambda_per_task.insert(t, value);
        }
        for c in [Coupling::DistrMatching, Coupling::SoftCoAnnotation] {
            w.coupling_weights.insert(c, value);
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        for (t, w) in &self.lambda_per_task {
            if !(*w >= 0.0) {
                return Err(Error::Config(format!("negative weight {w} for task {t:?}")));
            }
        }
        for (c, w) in &self.coupling_weights {
            if !(*w >= 0.0) {
                return Err(Error::Config(format!("negative weight {w} for coupling {c:?}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1e-3]", self.epsilon)));
        }
        if !(self.ccc_epsilon > 0.0 && self.ccc_epsilon <= 1e-3) {
            return Err(Error::Config(format!(
                "ccc_epsilon {} outside (0, 1e-3]",
                self.ccc_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub task_losses: BTreeMap<Task, f64>,
    pub coupling_losses: BTreeMap<Coupling, f64>,
    pub total: f64,
}

/// Weighted sum of the per-task and coupling losses present in a batch.
pub fn total_mt_loss(
    task_losses: BTreeMap<Task, f64>,
    coupling_losses: BTreeMap<Coupling, f64>,
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let total = compensated_sum(
        task_losses
            .iter()
            .map(|(t, l)| weights.task(*t) * l)
            .chain(coupling_losses.iter().map(|(c, l)| weights.coupling(*c) * l)),
    );
    Ok(LossReport {
        task_losses,
        coupling_losses,
        total,
    })
}

/// Concordance correlation coefficient with population moments.
pub fn ccc(y: &[f64], y_hat: &[f64], epsilon: f64) -> Result<f64> {
    ccc_grad(y, y_hat, epsilon).map(|(v, _)| v)
}

/// CCC and its gradient with respect to `y_hat`.
pub fn ccc_grad(y: &[f64], y_hat: &[f64], epsilon: f64) -> Result<(f64, Vec<f64>)> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!(
            "ccc over {} targets and {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if y.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ccc needs at least 2 values, got {}",
            y.len()
        )));
    }
    let n = y.len() as f64;
    let my = mean(y);
    let mh = mean(y_hat);
    let dy: Vec<f64> = y.iter().map(|v| v - my).collect();
    let dh: Vec<f64> = y_hat.iter().map(|v| v - mh).collect();
    let cov = compensated_sum(dy.iter().zip(&dh).map(|(a, b)| a * b)) / n;
    let var_y = compensated_sum(dy.iter().map(|a| a * a)) / n;
    let var_h = compensated_sum(dh.iter().map(|b| b * b)) / n;
    let shift = my - mh;
    let denom = var_y + var_h + shift * shift + epsilon;
    let rho = 2.0 * cov / denom;
    // d cov / d h_i = dy_i / n ; d var_h / d h_i = 2 dh_i / n ; d shift^2 / d h_i = -2 shift / n
    let grad = dy
        .iter()
        .zip(&dh)
        .map(|(a, b)| {
            let d_cov = a / n;
            let d_den = 2.0 * b / n - 2.0 * shift / n;
            2.0 * d_cov / denom - 2.0 * cov * d_den / (denom * denom)
        })
        .collect();
    Ok((rho, grad))
}

/// `1 - (ccc_valence + ccc_arousal) / 2`.
pub fn ccc_loss(y_va: &[[f64; 2]], y_hat_va: &[[f64; 2]], epsilon: f64) -> Result<f64> {
    ccc_loss_grad(y_va, y_hat_va, epsilon).map(|(v, _)| v)
}

pub fn ccc_loss_grad(
    y_va: &[[f64; 2]],
    y_hat_va: &[[f64; 2]],
    epsilon: f64,
) -> Result<(f64, Vec<[f64; 2]>)> {
    if y_va.len() != y_hat_va.len() {
        return Err(Error::Shape("VA targets and predictions differ in length".into()));
    }
    let column = |xs: &[[f64; 2]], d: usize| xs.iter().map(|p| p[d]).collect::<Vec<_>>();
    let (rho_v, g_v) = ccc_grad(&column(y_va, 0), &column(y_hat_va, 0), epsilon)?;
    let (rho_a, g_a) = ccc_grad(&column(y_va, 1), &column(y_hat_va, 1), epsilon)?;
    let grad = g_v
        .iter()
        .zip(&g_a)
        .map(|(gv, ga)| [-0.5 * gv, -0.5 * ga])
        .collect();
    Ok((1.0 - 0.5 * (rho_v + rho_a), grad))
}

fn clamp_with_slope(p: f64, lo: f64, hi: f64) -> (f64, f64) {
    if p < lo {
        (lo, 0.0)
    } else if p > hi {
        (hi, 0.0)
    } else {
        (p, 1.0)
    }
}

/// Masked, optionally weighted, binary cross entropy averaged over annotated
/// labels.
pub fn masked_bce(
    p: &[f64],
    y: &[Option<bool>],
    weights: Option<&[Option<f64>]>,
    epsilon: f64,
) -> Result<f64> {
    masked_bce_grad(p, y, weights, epsilon).map(|(v, _)| v)
}

pub fn masked_bce_grad(
    p: &[f64],
    y: &[Option<bool>],
    weights: Option<&[Option<f64>]>,
    epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    if p.len() != y.len() || weights.is_some_and(|w| w.len() != y.len()) {
        return Err(Error::Shape(format!(
            "masked_bce over {} probabilities and {} labels",
            p.len(),
            y.len()
        )));
    }
    let weight = |i: usize| weights.and_then(|w| w[i]).unwrap_or(1.0);
    let norm = compensated_sum(
        y.iter()
            .enumerate()
            .filter(|(_, t)| t.is_some())
            .map(|(i, _)| weight(i)),
    );
    if norm <= 0.0 {
        return Err(Error::InvalidArgument("no annotated labels for masked_bce".into()));
    }
    let mut grad = vec![0.0; p.len()];
    let mut terms = Vec::with_capacity(p.len());
    for (i, target) in y.iter().enumerate() {
        let Some(on) = target else { continue };
        let w = weight(i) / norm;
        let (pc, slope) = clamp_with_slope(p[i], epsilon, 1.0 - epsilon);
        if *on {
            terms.push(-w * pc.ln());
            grad[i] = -w * slope / pc;
        } else {
            terms.push(-w * (1.0 - pc).ln());
            grad[i] = w * slope / (1.0 - pc);
        }
    }
    Ok((compensated_sum(terms), grad))
}

#[derive(Debug, Clone, Copy)]
pub enum CategoricalTarget<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let sum = compensated_sum(p.iter().copied());
    if (sum - 1.0).abs() > DISTRIBUTION_TOL || p.iter().any(|v| *v < 0.0) {
        return Err(Error::MalformedDistribution(sum));
    }
    Ok(())
}

/// Cross entropy of a probability vector against a hard or soft target.
pub fn softmax_ce(p: &[f64], target: CategoricalTarget<'_>, epsilon: f64) -> Result<f64> {
    softmax_ce_grad(p, target, epsilon).map(|(v, _)| v)
}

pub fn softmax_ce_grad(
    p: &[f64],
    target: CategoricalTarget<'_>,
    epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    check_distribution(p)?;
    let mut grad = vec![0.0; p.len()];
    match target {
        CategoricalTarget::Hard(c) => {
            if c >= p.len() {
                return Err(Error::IndexOutOfRange {
                    what: "class",
                    index: c,
                    len: p.len(),
                });
            }
            let (pc, slope) = clamp_with_slope(p[c], epsilon, f64::INFINITY);
            grad[c] = -slope / pc;
            Ok((-pc.ln(), grad))
        }
        CategoricalTarget::Soft(q) => {
            if q.len() != p.len() {
                return Err(Error::Shape("soft target length differs from prediction".into()));
            }
            check_distribution(q)?;
            let mut terms = Vec::with_capacity(p.len());
            for (i, (pi, qi)) in p.iter().zip(q).enumerate() {
                if *qi == 0.0 {
                    continue;
                }
                let (pc, slope) = clamp_with_slope(*pi, epsilon, f64::INFINITY);
                terms.push(-qi * pc.ln());
                grad[i] = -qi * slope / pc;
            }
            Ok((compensated_sum(terms), grad))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SoftTargets {
    /// Per-label activation targets in `[0, 1]`.
    Binary(Vec<f64>),
    /// A distribution over classes.
    Categorical(Vec<f64>),
}

impl SoftTargets {
    pub fn values(&self) -> &[f64] {
        match self {
            SoftTargets::Binary(q) | SoftTargets::Categorical(q) => q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SoftTargets::Binary(q) => {
                if q.iter().all(|v| (0.0..=1.0).contains(v)) {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument("binary soft target outside [0, 1]".into()))
                }
            }
            SoftTargets::Categorical(q) => {
                let sum = compensated_sum(q.iter().copied());
                if (sum - 1.0).abs() <= 1e-9 {
                    Ok(())
                } else {
                    Err(Error::MalformedDistribution(sum))
                }
            }
        }
    }
}

/// Binary-label targets as a relatedness-weighted mixture over class
/// probabilities: `q_b = sum_k p_k r_kb`.
pub fn dm_targets(p_cat: &[f64], table: &RelatednessTable, reweight: bool) -> Result<SoftTargets> {
    if p_cat.len() != table.num_classes() {
        return Err(Error::Shape(format!(
            "{} class probabilities for a table of {} classes",
            p_cat.len(),
            table.num_classes()
        )));
    }
    check_distribution(p_cat)?;
    let mut q = vec![0.0; table.num_labels()];
    // Entries are sparse; accumulate per label in class order.
    let mut parts: Vec<Vec<f64>> = vec![Vec::new(); table.num_labels()];
    for (k, pk) in p_cat.iter().enumerate() {
        for e in table.lookup(k)? {
            parts[e.label].push(pk * table.coupling_weight(e, reweight));
        }
    }
    for (qb, terms) in q.iter_mut().zip(parts) {
        *qb = compensated_sum(terms);
    }
    Ok(SoftTargets::Binary(q))
}

/// `sum_i -p_i log q_i` with `q` clamped to `[epsilon, 1]`; terms with
/// `p_i = 0` are skipped.
pub fn dm_loss(p_bin: &[f64], q: &SoftTargets, epsilon: f64) -> Result<f64> {
    dm_loss_grad(p_bin, q.values(), epsilon).map(|(v, _, _)| v)
}

/// Returns the value and the gradients with respect to `p_bin` and `q`.
pub fn dm_loss_grad(p_bin: &[f64], q: &[f64], epsilon: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if p_bin.len() != q.len() {
        return Err(Error::Shape(format!(
            "dm_loss over {} predictions and {} targets",
            p_bin.len(),
            q.len()
        )));
    }
    let mut grad_p = vec![0.0; p_bin.len()];
    let mut grad_q = vec![0.0; q.len()];
    let mut terms = Vec::with_capacity(q.len());
    for i in 0..q.len() {
        if p_bin[i] == 0.0 {
            continue;
        }
        let (qc, slope) = clamp_with_slope(q[i], epsilon, 1.0);
        let log_q = qc.ln();
        terms.push(-p_bin[i] * log_q);
        grad_p[i] = -log_q;
        grad_q[i] = -p_bin[i] * slope / qc;
    }
    Ok((compensated_sum(terms), grad_p, grad_q))
}

/// Distribution-matching coupling for one sample, differentiated through both
/// the binary predictions and the class probabilities that form the targets.
/// Returns `(loss, d/dp_cat, d/dp_bin)`.
pub fn dm_coupling_grad(
    p_cat: &[f64],
    p_bin: &[f64],
    table: &RelatednessTable,
    reweight: bool,
    epsilon: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let q = dm_targets(p_cat, table, reweight)?;
    let (loss, grad_bin, grad_q) = dm_loss_grad(p_bin, q.values(), epsilon)?;
    let mut grad_cat = vec![0.0; p_cat.len()];
    for (k, g) in grad_cat.iter_mut().enumerate() {
        *g = compensated_sum(
            table
                .lookup(k)?
                .iter()
                .map(|e| grad_q[e.label] * table.coupling_weight(e, reweight)),
        );
    }
    Ok((loss, grad_cat, grad_bin))
}

/// `sum_e -p_e log q_e` against a soft emotion label.
pub fn sca_loss(p_emo: &[f64], q_emo: &EmotionSoftLabel, epsilon: f64) -> Result<f64> {
    sca_loss_grad(p_emo, q_emo, epsilon).map(|(v, _)| v)
}

pub fn sca_loss_grad(p_emo: &[f64], q_emo: &EmotionSoftLabel, epsilon: f64) -> Result<(f64, Vec<f64>)> {
    if p_emo.len() != q_emo.q.len() {
        return Err(Error::Shape(format!(
            "sca_loss over {} predictions and {} soft-label classes",
            p_emo.len(),
            q_emo.q.len()
        )));
    }
    let mut grad = vec![0.0; p_emo.len()];
    let mut terms = Vec::with_capacity(p_emo.len());
    for (e, (p, q)) in p_emo.iter().zip(&q_emo.q).enumerate() {
        let log_q = q.max(epsilon).ln();
        terms.push(-p * log_q);
        grad[e] = -log_q;
    }
    Ok((compensated_sum(terms), grad))
}
