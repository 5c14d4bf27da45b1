//! Shared-trunk multi-head network with hand-written backpropagation.
//!
//! The trunk is a stack of fully connected tanh layers; every head reads the
//! final trunk feature, so all task predictions are pooled from one
//! representation. Head outputs are post-activation: tanh for valence/arousal,
//! softmax for categorical heads, sigmoid for binary-label heads.

mod gradcheck;
mod optim;
mod postprocess;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, Objective, MAX_GRADCHECK_PARAMS};
pub use optim::SgdMomentum;
pub use postprocess::{median_filter, DEFAULT_MEDIAN_WINDOW};

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relatedness::{NUM_AUS, NUM_EMOTIONS};
use crate::tensor::Tensor;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Tanh,
    Softmax,
    Sigmoid,
}

/// What a head predicts, so objectives can find their inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadRole {
    /// Valence and arousal.
    Va,
    /// Mutually exclusive classes (basic expressions, identities).
    Categorical,
    /// Independent binary labels (AUs, attributes).
    Binary,
    /// Heads attached after training, e.g. compound expressions.
    Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub kind: HeadKind,
    pub role: HeadRole,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub trunk_widths: Vec<usize>,
    pub heads: Vec<HeadSpec>,
    pub seed: u64,
}

pub const DEFAULT_TRUNK: [usize; 2] = [64, 64];

impl ModelSpec {
    /// Valence/arousal, 7 expressions and 17 AUs.
    pub fn affect(input_dim: usize, trunk_widths: Vec<usize>, seed: u64) -> Self {
        Self {
            input_dim,
            trunk_widths,
            heads: vec![
                HeadSpec {
                    name: "va".into(),
                    kind: HeadKind::Tanh,
                    role: HeadRole::Va,
                    dim: 2,
                },
                HeadSpec {
                    name: "expr".into(),
                    kind: HeadKind::Softmax,
                    role: HeadRole::Categorical,
                    dim: NUM_EMOTIONS,
                },
                HeadSpec {
                    name: "au".into(),
                    kind: HeadKind::Sigmoid,
                    role: HeadRole::Binary,
                    dim: NUM_AUS,
                },
            ],
            seed,
        }
    }

    /// Identity classification plus binary attributes.
    pub fn recognition(
        input_dim: usize,
        trunk_widths: Vec<usize>,
        num_ids: usize,
        num_attrs: usize,
        seed: u64,
    ) -> Self {
        Self {
            input_dim,
            trunk_widths,
            heads: vec![
                HeadSpec {
                    name: "id".into(),
                    kind: HeadKind::Softmax,
                    role: HeadRole::Categorical,
                    dim: num_ids,
                },
                HeadSpec {
                    name: "attr".into(),
                    kind: HeadKind::Sigmoid,
                    role: HeadRole::Binary,
                    dim: num_attrs,
                },
            ],
            seed,
        }
    }

    pub fn head_index(&self, role: HeadRole) -> Option<usize> {
        self.heads.iter().position(|h| h.role == role)
    }

    fn feature_dim(&self) -> usize {
        self.trunk_widths.last().copied().unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.trunk_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.heads.is_empty() {
            return Err(Error::Config("model needs at least one head".into()));
        }
        for h in &self.heads {
            let min = match h.kind {
                HeadKind::Softmax => 2,
                _ => 1,
            };
            if h.dim < min {
                return Err(Error::Config(format!("head `{}` has dim {}", h.name, h.dim)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// `out x in`
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect();
        Self {
            weight: Tensor::new(vec![fan_out, fan_in], data).expect("shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let mut z = x.matmul_transposed(&self.weight);
        z.add_row_vector(&self.bias);
        z
    }
}

/// Per-row predictions of the affect layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub va: [f64; 2],
    pub expr_probs: Vec<f64>,
    pub au_probs: Vec<f64>,
}

/// Activations retained by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    input: Tensor,
    /// Post-activation output of each trunk layer.
    hidden: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadModel {
    spec: ModelSpec,
    trunk: Vec<Dense>,
    heads: Vec<Dense>,
    frozen_trunk: bool,
    generation: u64,
}

impl MultiHeadModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut trunk = Vec::with_capacity(spec.trunk_widths.len());
        let mut fan_in = spec.input_dim;
        for &w in &spec.trunk_widths {
            trunk.push(Dense::glorot(fan_in, w, &mut rng));
            fan_in = w;
        }
        let heads = spec
            .heads
            .iter()
            .map(|h| Dense::glorot(fan_in, h.dim, &mut rng))
            .collect();
        Ok(Self {
            spec,
            trunk,
            heads,
            frozen_trunk: false,
            generation: next_generation(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn trunk_frozen(&self) -> bool {
        self.frozen_trunk
    }

    pub fn set_trunk_frozen(&mut self, frozen: bool) {
        self.frozen_trunk = frozen;
    }

    /// Sets every output-head weight and bias to zero.
    pub fn zero_heads(&mut self) {
        for h in &mut self.heads {
            h.weight.fill(0.0);
            h.bias.fill(0.0);
        }
        self.generation = next_generation();
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Parameters in declaration order: trunk layers then heads, weight
    /// before bias.
    pub fn params(&self) -> Vec<&Tensor> {
        self.trunk
            .iter()
            .chain(&self.heads)
            .flat_map(|d| [&d.weight, &d.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.generation = next_generation();
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn is_trunk_param(&self, index: usize) -> bool {
        index < 2 * self.trunk.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input of shape {:?}, model expects {} features",
                x.shape(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    fn trunk_forward(&self, x: &Tensor) -> Vec<Tensor> {
        let mut hidden = Vec::with_capacity(self.trunk.len());
        for layer in &self.trunk {
            let mut h = layer.apply(hidden.last().unwrap_or(x));
            h.map_inplace(f64::tanh);
            hidden.push(h);
        }
        hidden
    }

    fn head_forward(&self, feature: &Tensor) -> Vec<Tensor> {
        self.heads
            .iter()
            .zip(&self.spec.heads)
            .map(|(layer, spec)| {
                let mut z = layer.apply(feature);
                match spec.kind {
                    HeadKind::Tanh => z.map_inplace(f64::tanh),
                    HeadKind::Sigmoid => z.map_inplace(sigmoid),
                    HeadKind::Softmax => {
                        for r in 0..z.rows() {
                            softmax_inplace(z.row_mut(r));
                        }
                    }
                }
                z
            })
            .collect()
    }

    /// Head outputs for a batch (`rows x input_dim`), one tensor per head.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let hidden = self.trunk_forward(x);
        Ok(self.head_forward(hidden.last().unwrap_or(x)))
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<ForwardCache> {
        self.check_input(x)?;
        let hidden = self.trunk_forward(x);
        let outputs = self.head_forward(hidden.last().unwrap_or(x));
        Ok(ForwardCache {
            generation: self.generation,
            input: x.clone(),
            hidden,
            outputs,
        })
    }

    /// Gradients of the loss with respect to every parameter, given the
    /// gradients with respect to each head's post-activation output.
    /// Trunk gradients are zero when the trunk is frozen.
    pub fn backward(&self, cache: &ForwardCache, output_grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if cache.generation != self.generation {
            return Err(Error::StaleForward);
        }
        if output_grads.len() != self.heads.len() {
            return Err(Error::Shape(format!(
                "{} output gradients for {} heads",
                output_grads.len(),
                self.heads.len()
            )));
        }
        let n = cache.input.rows();
        let feature = cache.hidden.last().unwrap_or(&cache.input);
        let mut d_feature = Tensor::zeros(&[n, self.spec.feature_dim()]);
        let mut head_grads = Vec::with_capacity(2 * self.heads.len());
        for ((layer, spec), (y, g)) in self
            .heads
            .iter()
            .zip(&self.spec.heads)
            .zip(cache.outputs.iter().zip(output_grads))
        {
            if g.shape() != y.shape() {
                return Err(Error::StaleForward);
            }
            let mut dz = g.clone();
            match spec.kind {
                HeadKind::Tanh => dz
                    .data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .for_each(|(d, y)| *d *= 1.0 - y * y),
                HeadKind::Sigmoid => dz
                    .data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .for_each(|(d, y)| *d *= y * (1.0 - y)),
                HeadKind::Softmax => {
                    for r in 0..n {
                        let yr = y.row(r);
                        let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        dz.row_mut(r)
                            .iter_mut()
                            .zip(yr)
                            .for_each(|(d, y)| *d = y * (*d - dot));
                    }
                }
            }
            head_grads.push(dz.transposed_matmul(feature));
            head_grads.push(dz.sum_rows());
            let back = dz.matmul(&layer.weight);
            d_feature
                .data_mut()
                .iter_mut()
                .zip(back.data())
                .for_each(|(a, b)| *a += b);
        }

        let mut trunk_grads = vec![None; self.trunk.len()];
        if !self.frozen_trunk {
            let mut dh = d_feature;
            for l in (0..self.trunk.len()).rev() {
                let h = &cache.hidden[l];
                let mut dz = dh;
                dz.data_mut()
                    .iter_mut()
                    .zip(h.data())
                    .for_each(|(d, h)| *d *= 1.0 - h * h);
                let prev = if l == 0 { &cache.input } else { &cache.hidden[l - 1] };
                trunk_grads[l] = Some((dz.transposed_matmul(prev), dz.sum_rows()));
                dh = dz.matmul(&self.trunk[l].weight);
            }
        }
        let mut grads = Vec::with_capacity(2 * (self.trunk.len() + self.heads.len()));
        for (layer, g) in self.trunk.iter().zip(trunk_grads) {
            let (gw, gb) = g.unwrap_or_else(|| {
                (
                    Tensor::zeros(layer.weight.shape()),
                    Tensor::zeros(layer.bias.shape()),
                )
            });
            grads.push(gw);
            grads.push(gb);
        }
        grads.extend(head_grads);
        Ok(grads)
    }

    /// Per-row bundles for models with VA, categorical and binary heads.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<PredictionBundle>> {
        let outputs = self.forward(x)?;
        bundles_from_outputs(&self.spec, &outputs)
    }

    /// Attaches (or replaces) a softmax head reading the trunk feature.
    pub fn replace_head(&mut self, name: &str, classes: usize, freeze_trunk: bool, seed: u64) -> Result<usize> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "a softmax head needs at least 2 classes, got {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = Dense::glorot(self.spec.feature_dim(), classes, &mut rng);
        let spec = HeadSpec {
            name: name.to_string(),
            kind: HeadKind::Softmax,
            role: HeadRole::Extra,
            dim: classes,
        };
        let index = match self.spec.heads.iter().position(|h| h.name == name) {
            Some(i) => {
                self.spec.heads[i] = spec;
                self.heads[i] = layer;
                i
            }
            None => {
                self.spec.heads.push(spec);
                self.heads.push(layer);
                self.heads.len() - 1
            }
        };
        self.frozen_trunk = freeze_trunk;
        self.generation = next_generation();
        Ok(index)
    }

    /// Flat checkpoint: little-endian `u64` header length, the JSON header
    /// describing the layers, then every parameter as little-endian `f64` in
    /// declaration order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            spec: self.spec.clone(),
            frozen_trunk: self.frozen_trunk,
            num_params: self.num_params(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + 8 * self.num_params());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = bytes;
        let mut len = [0u8; 8];
        reader.read_exact(&mut len).map_err(|_| Error::Data("checkpoint truncated".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if reader.len() < len {
            return Err(Error::Data("checkpoint header truncated".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&reader[..len])?;
        reader = &reader[len..];
        let mut model = Self::new(header.spec)?;
        model.frozen_trunk = header.frozen_trunk;
        if model.num_params() != header.num_params || reader.len() != 8 * header.num_params {
            return Err(Error::Data("checkpoint parameter count mismatch".into()));
        }
        for t in model.params_mut() {
            for v in t.data_mut() {
                let mut b = [0u8; 8];
                reader.read_exact(&mut b).expect("length checked");
                *v = f64::from_le_bytes(b);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(Error::at(path))?;
        f.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path).map_err(Error::at(path))?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    frozen_trunk: bool,
    num_params: usize,
}

pub fn bundles_from_outputs(spec: &ModelSpec, outputs: &[Tensor]) -> Result<Vec<PredictionBundle>> {
    let find = |role| {
        spec.head_index(role)
            .ok_or_else(|| Error::Config(format!("model has no {role:?} head")))
    };
    let (va, expr, au) = (find(HeadRole::Va)?, find(HeadRole::Categorical)?, find(HeadRole::Binary)?);
    Ok((0..outputs[va].rows())
        .map(|r| PredictionBundle {
            va: [outputs[va].row(r)[0], outputs[va].row(r)[1]],
            expr_probs: outputs[expr].row(r).to_vec(),
            au_probs: outputs[au].row(r).to_vec(),
        })
        .collect())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn zero_heads_give_neutral_outputs() {
        let mut m = MultiHeadModel::new(ModelSpec::affect(5, vec![8], 1)).unwrap();
        m.zero_heads();
        for b in m.predict(&batch(3, 5, 2)).unwrap() {
            assert_eq!(b.va, [0.0, 0.0]);
            b.expr_probs.iter().for_each(|p| assert_abs_diff_eq!(*p, 1.0 / 7.0, epsilon = 1e-15));
            b.au_probs.iter().for_each(|p| assert_eq!(*p, 0.5));
        }
    }

    #[test]
    fn forward_is_deterministic_and_order_preserving() {
        let a = MultiHeadModel::new(ModelSpec::affect(5, vec![8, 8], 42)).unwrap();
        let b = MultiHeadModel::new(ModelSpec::affect(5, vec![8, 8], 42)).unwrap();
        let x = batch(4, 5, 3);
        let pa = a.predict(&x).unwrap();
        assert_eq!(pa, b.predict(&x).unwrap());
        assert_eq!(pa.len(), 4);
        for (r, bundle) in pa.iter().enumerate() {
            let single = Tensor::new(vec![1, 5], x.row(r).to_vec()).unwrap();
            assert_eq!(&a.predict(&single).unwrap()[0], bundle);
            assert_abs_diff_eq!(bundle.expr_probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(bundle.au_probs.iter().all(|p| *p > 0.0 && *p < 1.0));
            assert!(bundle.va.iter().all(|v| v.abs() < 1.0));
        }
        assert!(a.forward(&batch(2, 4, 0)).is_err());
    }

    #[test]
    fn zero_output_gradients_give_zero_parameter_gradients() {
        let m = MultiHeadModel::new(ModelSpec::affect(5, vec![8], 1)).unwrap();
        let x = batch(3, 5, 9);
        let cache = m.forward_cached(&x).unwrap();
        let zeros: Vec<Tensor> = cache.outputs.iter().map(|o| Tensor::zeros(o.shape())).collect();
        for g in m.backward(&cache, &zeros).unwrap() {
            assert!(g.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = MultiHeadModel::new(ModelSpec::affect(5, vec![8], 1)).unwrap();
        let cache = m.forward_cached(&batch(3, 5, 9)).unwrap();
        let grads: Vec<Tensor> = cache.outputs.iter().map(|o| Tensor::zeros(o.shape())).collect();
        m.params_mut()[0].data_mut()[0] += 1.0;
        assert!(matches!(m.backward(&cache, &grads), Err(Error::StaleForward)));
    }

    /// One tanh trunk layer and a single tanh output unit trained with
    /// `0.5 * sum (y - t)^2`: closed-form gradient of the output layer.
    #[test]
    fn output_layer_gradient_matches_closed_form() {
        let spec = ModelSpec {
            input_dim: 3,
            trunk_widths: vec![4],
            heads: vec![HeadSpec {
                name: "out".into(),
                kind: HeadKind::Tanh,
                role: HeadRole::Va,
                dim: 1,
            }],
            seed: 8,
        };
        let m = MultiHeadModel::new(spec).unwrap();
        let x = batch(5, 3, 4);
        let target = [0.3, -0.2, 0.1, 0.5, -0.6];
        let cache = m.forward_cached(&x).unwrap();
        let y = &cache.outputs[0];
        let g = Tensor::new(vec![5, 1], (0..5).map(|i| y.row(i)[0] - target[i]).collect()).unwrap();
        let grads = m.backward(&cache, &[g]).unwrap();
        // dL/dW_out[j] = sum_i (y_i - t_i)(1 - y_i^2) h_ij ; dL/db = sum_i (y_i - t_i)(1 - y_i^2)
        let h = &cache.hidden[0];
        for j in 0..4 {
            let expect: f64 = (0..5)
                .map(|i| {
                    let yi = y.row(i)[0];
                    (yi - target[i]) * (1.0 - yi * yi) * h.row(i)[j]
                })
                .sum();
            assert_abs_diff_eq!(grads[2].data()[j], expect, epsilon = 1e-14);
        }
        let expect_b: f64 = (0..5)
            .map(|i| {
                let yi = y.row(i)[0];
                (yi - target[i]) * (1.0 - yi * yi)
            })
            .sum();
        assert_abs_diff_eq!(grads[3].data()[0], expect_b, epsilon = 1e-14);
    }

    #[test]
    fn frozen_trunk_has_zero_gradients() {
        let mut m = MultiHeadModel::new(ModelSpec::affect(5, vec![8], 1)).unwrap();
        m.set_trunk_frozen(true);
        let cache = m.forward_cached(&batch(3, 5, 9)).unwrap();
        let ones: Vec<Tensor> = cache
            .outputs
            .iter()
            .map(|o| Tensor::new(o.shape().to_vec(), vec![1.0; o.len()]).unwrap())
            .collect();
        let grads = m.backward(&cache, &ones).unwrap();
        for (i, g) in grads.iter().enumerate() {
            if m.is_trunk_param(i) {
                assert!(g.data().iter().all(|v| *v == 0.0));
            }
        }
        assert!(grads[grads.len() - 1].data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn replace_head_adds_softmax_without_touching_others() {
        let mut m = MultiHeadModel::new(ModelSpec::affect(6, vec![10], 3)).unwrap();
        let before = m.num_params();
        let x = batch(2, 6, 1);
        let old = m.predict(&x).unwrap();
        let idx = m.replace_head("compound", 16, false, 77).unwrap();
        assert_eq!(m.num_params(), before + 10 * 16 + 16);
        assert_eq!(m.predict(&x).unwrap(), old);
        let out = m.forward(&x).unwrap();
        assert_eq!(out[idx].cols(), 16);
        m.replace_head("compound", 11, true, 78).unwrap();
        let out = m.forward(&x).unwrap();
        assert_eq!(out[idx].cols(), 11);
        for r in 0..2 {
            assert_abs_diff_eq!(out[idx].row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        assert!(m.trunk_frozen());
        assert!(m.replace_head("bad", 1, false, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = MultiHeadModel::new(ModelSpec::affect(4, vec![6, 5], 12)).unwrap();
        m.replace_head("compound", 11, true, 2).unwrap();
        let bytes = m.to_checkpoint_bytes();
        let back = MultiHeadModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.params(), m.params());
        assert!(back.trunk_frozen());
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert!(MultiHeadModel::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn outputs_stay_in_range(seed in any::<u64>(), n in 1usize..12, scale in 0.0f64..50.0) {
                let model = MultiHeadModel::new(ModelSpec::affect(5, vec![7, 6], seed)).unwrap();
                let x = batch(n, 5, seed ^ 7);
                let x = Tensor::new(vec![n, 5], x.data().iter().map(|v| v * scale).collect()).unwrap();
                for b in model.predict(&x).unwrap() {
                    prop_assert!((b.expr_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert!(b.au_probs.iter().all(|p| *p > 0.0 && *p < 1.0));
                    prop_assert!(b.va.iter().all(|v| *v > -1.0 && *v < 1.0));
                }
            }
        }
    }
}
