//! Epoch loop over jointly batched heterogeneous sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::HeterogeneousSample;
use crate::losses::{Coupling, LossReport, LossWeights, Task};
use crate::model::{MultiHeadModel, SgdMomentum};
use crate::objective::{BatchObjective, CouplingMode, CouplingSetup};
use crate::relatedness::RelatednessTable;
use crate::scheduler::{epoch_seed, next_joint_batch, plan_epoch};

/// The small fully connected trunk needs a larger step than
/// [`SgdMomentum::DEFAULT_LR`] to converge in a few thousand steps.
pub const DEFAULT_TRAIN_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub coupling: CouplingMode,
    pub reweight_sca: bool,
    pub reweight_dm: bool,
    pub loss_weights: LossWeights,
    pub max_batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            coupling: CouplingMode::SoftPlusDm,
            reweight_sca: true,
            reweight_dm: false,
            loss_weights: LossWeights::default(),
            max_batch: 64,
            epochs: 10,
            lr: DEFAULT_TRAIN_LR,
            momentum: SgdMomentum::DEFAULT_MOMENTUM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub report: LossReport,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "epoch,iteration,total,va,expr,au,id,attr,distr_matching,soft_co_annotation";

    /// One CSV line; terms absent from the batch are left empty.
    pub fn csv_line(&self) -> String {
        let cell = |v: Option<&f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        let r = &self.report;
        let mut cells = vec![
            self.epoch.to_string(),
            self.iteration.to_string(),
            format!("{:e}", r.total),
        ];
        for t in [Task::Va, Task::Expr, Task::Au, Task::Id, Task::Attr] {
            cells.push(cell(r.task_losses.get(&t)));
        }
        for c in [Coupling::DistrMatching, Coupling::SoftCoAnnotation] {
            cells.push(cell(r.coupling_losses.get(&c)));
        }
        cells.join(",")
    }
}

/// Per-epoch schedule facts, for the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub seed: u64,
    pub iterations: usize,
    pub batch_sizes: Vec<usize>,
    pub mean_total: f64,
}

/// Trains `model` in place. `sets` are the separately annotated subsets;
/// one joint batch per iteration takes a slice from each. `on_step` sees
/// every step's losses, and `on_epoch` the model after each epoch.
pub fn train(
    model: &mut MultiHeadModel,
    sets: &[&[HeterogeneousSample]],
    table: &RelatednessTable,
    settings: &TrainSettings,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    mut on_epoch: impl FnMut(usize, &MultiHeadModel) -> Result<()>,
) -> Result<Vec<EpochSummary>> {
    let sets: Vec<&[HeterogeneousSample]> = sets.iter().copied().filter(|s| !s.is_empty()).collect();
    if sets.is_empty() {
        return Err(Error::Empty("no training samples"));
    }
    let sizes: Vec<usize> = sets.iter().map(|s| s.len()).collect();
    let mut opt = SgdMomentum::new(settings.lr, settings.momentum)?;
    let setup = CouplingSetup {
        mode: settings.coupling,
        table,
        reweight_sca: settings.reweight_sca,
        reweight_dm: settings.reweight_dm,
    };
    let mut summaries = Vec::with_capacity(settings.epochs);
    let mut joint = Vec::new();
    for epoch in 0..settings.epochs {
        let seed = epoch_seed(settings.seed, epoch as u64);
        let plan = plan_epoch(&sizes, settings.max_batch, seed)?;
        for (s, set) in sets.iter().enumerate() {
            if set.iter().any(|x| x.va.is_some()) {
                plan.require_min_slice(s, 2)?;
            }
        }
        let mut totals = Vec::with_capacity(plan.iterations);
        for iteration in 0..plan.iterations {
            joint.clear();
            joint.extend(
                next_joint_batch(&plan, &sets, iteration)?
                    .into_iter()
                    .map(|t| t.sample.clone()),
            );
            let (objective, x) = BatchObjective::new(&joint, model.spec(), &setup, &settings.loss_weights)?;
            let cache = model.forward_cached(&x)?;
            let (report, out_grads) = objective.evaluate(&cache.outputs)?;
            let grads = model.backward(&cache, &out_grads)?;
            if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}, iteration {iteration}")));
            }
            opt.step(model, &grads)?;
            totals.push(report.total);
            on_step(&StepRecord {
                epoch,
                iteration,
                report,
            })?;
        }
        on_epoch(epoch, model)?;
        summaries.push(EpochSummary {
            epoch,
            seed,
            iterations: plan.iterations,
            batch_sizes: plan.batch_sizes.clone(),
            mean_total: totals.iter().sum::<f64>() / totals.len() as f64,
        });
    }
    Ok(summaries)
}
