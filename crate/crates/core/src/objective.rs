//! The multi-task training objective over one joint batch: per-task losses on
//! whichever labels each sample carries, plus the optional coupling terms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{
    co_annotate_aus_to_emotion, co_annotate_emotion_to_aus, soft_co_annotate, EmotionSoftLabel,
    HeterogeneousSample,
};
use crate::losses::{
    ccc_loss_grad, dm_coupling_grad, masked_bce_grad, sca_loss_grad, softmax_ce_grad,
    total_mt_loss, CategoricalTarget, Coupling, LossReport, LossWeights, Task,
};
use crate::model::{HeadRole, ModelSpec, Objective};
use crate::relatedness::RelatednessTable;
use crate::tensor::Tensor;

/// How task relatedness enters training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    None,
    /// Labels of one task are derived from the other before training.
    CoAnnotation,
    SoftCoAnnotation,
    DistrMatching,
    /// Soft co-annotation and distribution matching together.
    SoftPlusDm,
}

impl CouplingMode {
    pub const ALL: [CouplingMode; 5] = [
        CouplingMode::None,
        CouplingMode::CoAnnotation,
        CouplingMode::SoftCoAnnotation,
        CouplingMode::DistrMatching,
        CouplingMode::SoftPlusDm,
    ];

    pub fn co_annotates(self) -> bool {
        self == CouplingMode::CoAnnotation
    }

    pub fn uses_sca(self) -> bool {
        matches!(self, CouplingMode::SoftCoAnnotation | CouplingMode::SoftPlusDm)
    }

    pub fn uses_dm(self) -> bool {
        matches!(self, CouplingMode::DistrMatching | CouplingMode::SoftPlusDm)
    }

    pub fn name(self) -> &'static str {
        match self {
            CouplingMode::None => "none",
            CouplingMode::CoAnnotation => "co_annotation",
            CouplingMode::SoftCoAnnotation => "soft_co_annotation",
            CouplingMode::DistrMatching => "distr_matching",
            CouplingMode::SoftPlusDm => "soft_plus_dm",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CouplingSetup<'a> {
    pub mode: CouplingMode,
    pub table: &'a RelatednessTable,
    /// Weight observational AUs in the soft-label indicator scores.
    pub reweight_sca: bool,
    /// Weight observational AUs in the distribution-matching mixture
    /// instead of treating every related AU as certain.
    pub reweight_dm: bool,
}

impl<'a> CouplingSetup<'a> {
    /// Reweighted indicator scores, unit-weight distribution matching.
    pub fn new(mode: CouplingMode, table: &'a RelatednessTable) -> Self {
        Self {
            mode,
            table,
            reweight_sca: true,
            reweight_dm: false,
        }
    }
}

struct Heads {
    va: Option<usize>,
    cat: Option<usize>,
    bin: Option<usize>,
    cat_task: Task,
    bin_task: Task,
}

/// Targets of one joint batch, ready to score head outputs.
pub struct BatchObjective<'a> {
    heads: Heads,
    num_heads: usize,
    rows: usize,
    va: Vec<(usize, [f64; 2])>,
    cat: Vec<(usize, usize)>,
    bin: Vec<(usize, Vec<Option<bool>>, Option<Vec<Option<f64>>>)>,
    sca: Vec<(usize, EmotionSoftLabel)>,
    dm: Option<(&'a RelatednessTable, bool)>,
    weights: LossWeights,
}

impl<'a> BatchObjective<'a> {
    /// Builds the objective and the feature matrix for `samples`.
    pub fn new(
        samples: &[HeterogeneousSample],
        spec: &ModelSpec,
        coupling: &CouplingSetup<'a>,
        weights: &LossWeights,
    ) -> Result<(Self, Tensor)> {
        weights.validate()?;
        if samples.is_empty() {
            return Err(Error::Empty("empty batch"));
        }
        let heads = resolve_heads(spec);
        let table = coupling.table;
        if coupling.mode != CouplingMode::None {
            let (cat, bin) = (heads.cat, heads.bin);
            let (Some(cat), Some(bin)) = (cat, bin) else {
                return Err(Error::Config(
                    "coupling needs a categorical and a binary head".into(),
                ));
            };
            if spec.heads[cat].dim != table.num_classes() || spec.heads[bin].dim != table.num_labels() {
                return Err(Error::Config(format!(
                    "relatedness table is {}x{}, heads are {}x{}",
                    table.num_classes(),
                    table.num_labels(),
                    spec.heads[cat].dim,
                    spec.heads[bin].dim
                )));
            }
        }

        let mut features = Vec::with_capacity(samples.len() * spec.input_dim);
        let mut obj = Self {
            heads,
            num_heads: spec.heads.len(),
            rows: samples.len(),
            va: Vec::new(),
            cat: Vec::new(),
            bin: Vec::new(),
            sca: Vec::new(),
            dm: coupling.mode.uses_dm().then_some((table, coupling.reweight_dm)),
            weights: weights.clone(),
        };
        for (row, raw) in samples.iter().enumerate() {
            if raw.features.len() != spec.input_dim {
                return Err(Error::Shape(format!(
                    "sample `{}` has {} features, model expects {}",
                    raw.id,
                    raw.features.len(),
                    spec.input_dim
                )));
            }
            features.extend_from_slice(&raw.features);
            let owned;
            let s = if coupling.mode.co_annotates() {
                owned = co_annotate_aus_to_emotion(&co_annotate_emotion_to_aus(raw, table), table);
                &owned
            } else {
                raw
            };
            if let (Some(va), Some(_)) = (s.va, obj.heads.va) {
                obj.va.push((row, va));
            }
            if let (Some(e), Some(h)) = (s.expr, obj.heads.cat) {
                if e >= spec.heads[h].dim {
                    return Err(Error::IndexOutOfRange {
                        what: "class label",
                        index: e,
                        len: spec.heads[h].dim,
                    });
                }
                obj.cat.push((row, e));
            }
            if let (Some(au), Some(h)) = (&s.au, obj.heads.bin) {
                if au.len() != spec.heads[h].dim {
                    return Err(Error::Shape(format!(
                        "sample `{}` has {} binary labels, head has {}",
                        s.id,
                        au.len(),
                        spec.heads[h].dim
                    )));
                }
                if s.annotated_au_count() > 0 {
                    obj.bin.push((row, au.clone(), s.au_weights.clone()));
                }
                if coupling.mode.uses_sca() {
                    if let Some(q) = soft_co_annotate(s, table, coupling.reweight_sca) {
                        obj.sca.push((row, q));
                    }
                }
            }
        }
        let x = Tensor::new(vec![samples.len(), spec.input_dim], features)?;
        Ok((obj, x))
    }

    /// Loss report and the gradient with respect to each head output.
    pub fn evaluate(&self, outputs: &[Tensor]) -> Result<(LossReport, Vec<Tensor>)> {
        if outputs.len() != self.num_heads || outputs.iter().any(|o| o.rows() != self.rows) {
            return Err(Error::Shape("outputs do not match the batch".into()));
        }
        let mut grads: Vec<Tensor> = outputs.iter().map(|o| Tensor::zeros(o.shape())).collect();
        let mut task_losses = BTreeMap::new();
        let mut coupling_losses = BTreeMap::new();
        let eps = self.weights.epsilon;

        if let (Some(h), false) = (self.heads.va, self.va.is_empty()) {
            let targets: Vec<[f64; 2]> = self.va.iter().map(|(_, t)| *t).collect();
            let preds: Vec<[f64; 2]> = self
                .va
                .iter()
                .map(|(r, _)| [outputs[h].row(*r)[0], outputs[h].row(*r)[1]])
                .collect();
            let (loss, g) = ccc_loss_grad(&targets, &preds, self.weights.ccc_epsilon)?;
            let lambda = self.weights.task(Task::Va);
            for ((r, _), gr) in self.va.iter().zip(g) {
                let row = grads[h].row_mut(*r);
                row[0] += lambda * gr[0];
                row[1] += lambda * gr[1];
            }
            task_losses.insert(Task::Va, loss);
        }

        if let (Some(h), false) = (self.heads.cat, self.cat.is_empty()) {
            let n = self.cat.len() as f64;
            let lambda = self.weights.task(self.heads.cat_task);
            let mut total = Vec::with_capacity(self.cat.len());
            for (r, e) in &self.cat {
                let (l, g) = softmax_ce_grad(outputs[h].row(*r), CategoricalTarget::Hard(*e), eps)?;
                total.push(l / n);
                add_scaled(grads[h].row_mut(*r), &g, lambda / n);
            }
            task_losses.insert(self.heads.cat_task, crate::losses::compensated_sum(total));
        }

        if let (Some(h), false) = (self.heads.bin, self.bin.is_empty()) {
            let n = self.bin.len() as f64;
            let lambda = self.weights.task(self.heads.bin_task);
            let mut total = Vec::with_capacity(self.bin.len());
            for (r, y, w) in &self.bin {
                let (l, g) = masked_bce_grad(outputs[h].row(*r), y, w.as_deref(), eps)?;
                total.push(l / n);
                add_scaled(grads[h].row_mut(*r), &g, lambda / n);
            }
            task_losses.insert(self.heads.bin_task, crate::losses::compensated_sum(total));
        }

        if let (Some(h), false) = (self.heads.cat, self.sca.is_empty()) {
            let n = self.sca.len() as f64;
            let lambda = self.weights.coupling(Coupling::SoftCoAnnotation);
            let mut total = Vec::with_capacity(self.sca.len());
            for (r, q) in &self.sca {
                let (l, g) = sca_loss_grad(outputs[h].row(*r), q, eps)?;
                total.push(l / n);
                add_scaled(grads[h].row_mut(*r), &g, lambda / n);
            }
            coupling_losses.insert(Coupling::SoftCoAnnotation, crate::losses::compensated_sum(total));
        }

        if let (Some((table, reweight)), Some(c), Some(b)) = (self.dm, self.heads.cat, self.heads.bin) {
            let n = self.rows as f64;
            let lambda = self.weights.coupling(Coupling::DistrMatching);
            let mut total = Vec::with_capacity(self.rows);
            for r in 0..self.rows {
                let (l, g_cat, g_bin) =
                    dm_coupling_grad(outputs[c].row(r), outputs[b].row(r), table, reweight, eps)?;
                total.push(l / n);
                add_scaled(grads[c].row_mut(r), &g_cat, lambda / n);
                add_scaled(grads[b].row_mut(r), &g_bin, lambda / n);
            }
            coupling_losses.insert(Coupling::DistrMatching, crate::losses::compensated_sum(total));
        }

        let report = total_mt_loss(task_losses, coupling_losses, &self.weights)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("batch loss {}", report.total)));
        }
        Ok((report, grads))
    }

    pub fn counts(&self) -> BatchCounts {
        BatchCounts {
            rows: self.rows,
            va: self.va.len(),
            categorical: self.cat.len(),
            binary: self.bin.len(),
            soft_labels: self.sca.len(),
        }
    }
}

/// How many rows feed each loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCounts {
    pub rows: usize,
    pub va: usize,
    pub categorical: usize,
    pub binary: usize,
    pub soft_labels: usize,
}

impl Objective for BatchObjective<'_> {
    fn loss_and_output_grads(&self, outputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        self.evaluate(outputs).map(|(r, g)| (r.total, g))
    }
}

fn resolve_heads(spec: &ModelSpec) -> Heads {
    let cat = spec.head_index(HeadRole::Categorical);
    let bin = spec.head_index(HeadRole::Binary);
    let named = |i: Option<usize>, name: &str| i.is_some_and(|i| spec.heads[i].name == name);
    Heads {
        va: spec.head_index(HeadRole::Va),
        cat,
        bin,
        cat_task: if named(cat, "id") { Task::Id } else { Task::Expr },
        bin_task: if named(bin, "attr") { Task::Attr } else { Task::Au },
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
}
