use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::MultiHeadModel;

/// Gradient checks perturb parameters one at a time; larger models are
/// rejected rather than silently subsampled into meaninglessness.
pub const MAX_GRADCHECK_PARAMS: usize = 10_000;

/// A scalar loss over head outputs.
pub trait Objective {
    /// Loss value and its gradient with respect to each head output.
    fn loss_and_output_grads(&self, outputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Entries sampled from each parameter tensor; smaller tensors are
    /// checked exhaustively.
    pub samples_per_tensor: usize,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_tensor: 24,
            floor: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<GradCheckEntry>,
    /// Frozen parameters must receive exactly zero gradient.
    pub frozen_gradients_zero: bool,
}

/// Compares backpropagated gradients against central finite differences.
pub fn gradient_check(
    model: &MultiHeadModel,
    x: &Tensor,
    objective: &dyn Objective,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if model.num_params() > MAX_GRADCHECK_PARAMS {
        return Err(Error::InvalidArgument(format!(
            "gradient check on {} parameters; limit is {MAX_GRADCHECK_PARAMS}",
            model.num_params()
        )));
    }
    if !(config.step > 0.0) || !(config.floor > 0.0) {
        return Err(Error::InvalidArgument("step and floor must be positive".into()));
    }
    let cache = model.forward_cached(x)?;
    let (loss, out_grads) = objective.loss_and_output_grads(&cache.outputs)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss} at the unperturbed point")));
    }
    let analytic = model.backward(&cache, &out_grads)?;

    let eval = |m: &MultiHeadModel| -> Result<f64> {
        let (l, _) = objective.loss_and_output_grads(&m.forward(x)?)?;
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::NonFinite(format!("loss {l} under perturbation")))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        frozen_gradients_zero: true,
    };
    for (t, grad) in analytic.iter().enumerate() {
        if model.trunk_frozen() && model.is_trunk_param(t) {
            report.frozen_gradients_zero &= grad.data().iter().all(|g| *g == 0.0);
            continue;
        }
        let len = grad.len();
        let indices: Vec<usize> = if len <= config.samples_per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, config.samples_per_tensor).into_vec()
        };
        for i in indices {
            let original = model.params()[t].data()[i];
            probe.params_mut()[t].data_mut()[i] = original + config.step;
            let plus = eval(&probe)?;
            probe.params_mut()[t].data_mut()[i] = original - config.step;
            let minus = eval(&probe)?;
            probe.params_mut()[t].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some(GradCheckEntry {
                    tensor: t,
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
