//! Synthetic heterogeneous data with a known emotion/AU relatedness.
//!
//! Each sample draws an emotion from the prior, every AU independently with
//! the table's weight for that emotion, and VA around the emotion's mean.
//! Features are a fixed random linear image of the labels plus noise.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{HeterogeneousSample, SequenceKey};
use crate::relatedness::{
    CoAnnotatedCorpus, RelatednessTable, ANGER, DISGUST, FEAR, HAPPINESS, NEUTRAL, NUM_AUS,
    NUM_EMOTIONS, SADNESS,
};

/// Width of the label vector the features are generated from.
pub const LATENT_DIM: usize = NUM_EMOTIONS + NUM_AUS + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// Gaussian matrix scaled by `1/sqrt(LATENT_DIM)`.
    RandomLinear,
    /// Features are the label vector itself; needs `feature_dim == LATENT_DIM`.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub relatedness: RelatednessTable,
    pub va_means: Vec<[f64; 2]>,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub class_prior: Vec<f64>,
    pub feature_map: FeatureMap,
    /// Gains of the emotion, AU and VA blocks of the label vector before
    /// the feature map.
    pub block_gains: [f64; 3],
    /// Groups consecutive samples into videos of this many frames.
    pub frames_per_video: Option<usize>,
    pub seed: u64,
}

pub const DEFAULT_VA_MEANS: [[f64; 2]; NUM_EMOTIONS] = [
    [0.0, 0.0],
    [0.6, 0.3],
    [-0.6, -0.3],
    [0.2, 0.7],
    [-0.4, 0.6],
    [-0.5, 0.2],
    [-0.5, 0.6],
];

impl GeneratorSpec {
    pub fn new(feature_dim: usize, noise_scale: f64, seed: u64) -> Self {
        Self {
            relatedness: RelatednessTable::emotion_au_domain(),
            va_means: DEFAULT_VA_MEANS.to_vec(),
            feature_dim,
            noise_scale,
            class_prior: vec![1.0 / NUM_EMOTIONS as f64; NUM_EMOTIONS],
            feature_map: FeatureMap::RandomLinear,
            block_gains: [1.0, 1.0, 1.0],
            frames_per_video: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.relatedness;
        if t.num_classes() != NUM_EMOTIONS || t.num_labels() != NUM_AUS {
            return Err(Error::Config("generator needs a 7-emotion, 17-AU table".into()));
        }
        if self.class_prior.len() != NUM_EMOTIONS
            || self.class_prior.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || self.class_prior.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(format!("degenerate class prior {:?}", self.class_prior)));
        }
        if self.va_means.len() != NUM_EMOTIONS {
            return Err(Error::Config("need one VA mean per emotion".into()));
        }
        for (e, m) in self.va_means.iter().enumerate() {
            if !(va_margin(e, *m) > 0.0) {
                return Err(Error::Config(format!(
                    "VA mean {m:?} of emotion {e} violates the consistency rules"
                )));
            }
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::Config(format!("noise_scale {}", self.noise_scale)));
        }
        if self.feature_dim == 0
            || (self.feature_map == FeatureMap::Identity && self.feature_dim != LATENT_DIM)
        {
            return Err(Error::Config(format!("feature_dim {}", self.feature_dim)));
        }
        if self.block_gains.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Config(format!("block gains {:?}", self.block_gains)));
        }
        if self.frames_per_video == Some(0) {
            return Err(Error::Config("frames_per_video must be positive".into()));
        }
        Ok(())
    }
}

/// Half-width of a square around `mean` that stays inside the emotion's VA
/// consistency region and `[-1, 1]^2`.
fn va_margin(emotion: usize, [v, a]: [f64; 2]) -> f64 {
    let rule = match emotion {
        NEUTRAL => (0.15 - v.hypot(a)) / std::f64::consts::SQRT_2,
        SADNESS | DISGUST | FEAR => -v,
        ANGER => (-v).min(a),
        HAPPINESS => v,
        _ => f64::INFINITY,
    };
    rule.min(1.0 - v.abs()).min(1.0 - a.abs())
}

/// Label-type fractions of the three disjoint sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub va: f64,
    pub expr: f64,
    pub au: f64,
}

impl Partition {
    pub const THIRDS: Partition = Partition {
        va: 1.0 / 3.0,
        expr: 1.0 / 3.0,
        au: 1.0 / 3.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSets {
    pub va: Vec<HeterogeneousSample>,
    pub expr: Vec<HeterogeneousSample>,
    pub au: Vec<HeterogeneousSample>,
}

pub struct Generator {
    spec: GeneratorSpec,
    /// `feature_dim x LATENT_DIM`, row-major.
    map: Vec<f64>,
    au_probs: Vec<Vec<f64>>,
    va_amplitude: Vec<f64>,
    prior: WeightedIndex<f64>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let map = match spec.feature_map {
            FeatureMap::Identity => {
                let mut m = vec![0.0; LATENT_DIM * LATENT_DIM];
                (0..LATENT_DIM).for_each(|i| m[i * LATENT_DIM + i] = 1.0);
                m
            }
            FeatureMap::RandomLinear => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(1);
                let scale = 1.0 / (LATENT_DIM as f64).sqrt();
                (0..spec.feature_dim * LATENT_DIM)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        };
        let au_probs = spec.relatedness.weight_matrix(true);
        let va_amplitude = spec
            .va_means
            .iter()
            .enumerate()
            .map(|(e, m)| spec.noise_scale.min(0.99 * va_margin(e, *m)))
            .collect();
        let prior = WeightedIndex::new(&spec.class_prior)
            .map_err(|e| Error::Config(format!("class prior: {e}")))?;
        Ok(Self {
            spec,
            map,
            au_probs,
            va_amplitude,
            prior,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// `n` fully labelled samples drawn with `sample_seed`; the feature map
    /// depends only on the generator spec.
    pub fn draw(&self, n: usize, sample_seed: u64) -> Vec<HeterogeneousSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        (0..n).map(|i| self.draw_one(i, &mut rng)).collect()
    }

    fn draw_one(&self, i: usize, rng: &mut ChaCha8Rng) -> HeterogeneousSample {
        let e = self.prior.sample(rng);
        let au: Vec<bool> = self.au_probs[e].iter().map(|p| rng.random::<f64>() < *p).collect();
        let amp = self.va_amplitude[e];
        let [mv, ma] = self.spec.va_means[e];
        let mut jitter = || {
            if amp > 0.0 {
                rng.random_range(-amp..=amp)
            } else {
                0.0
            }
        };
        let va = [(mv + jitter()).clamp(-1.0, 1.0), (ma + jitter()).clamp(-1.0, 1.0)];

        let [ge, ga, gv] = self.spec.block_gains;
        let mut z = [0.0; LATENT_DIM];
        z[e] = ge;
        for (k, on) in au.iter().enumerate() {
            z[NUM_EMOTIONS + k] = ga * f64::from(u8::from(*on));
        }
        z[LATENT_DIM - 2] = gv * va[0];
        z[LATENT_DIM - 1] = gv * va[1];
        let features = self
            .map
            .chunks(LATENT_DIM)
            .map(|row| {
                let clean: f64 = row.iter().zip(&z).map(|(w, v)| w * v).sum();
                if self.spec.noise_scale > 0.0 {
                    clean + self.spec.noise_scale * rng.sample::<f64, _>(StandardNormal)
                } else {
                    clean
                }
            })
            .collect();
        HeterogeneousSample {
            id: format!("s{i}"),
            features,
            va: Some(va),
            expr: Some(e),
            au: Some(au.into_iter().map(Some).collect()),
            au_weights: None,
            sequence_key: self.spec.frames_per_video.map(|f| SequenceKey {
                video: format!("v{}", i / f),
                frame: (i % f) as u64,
            }),
            compound: None,
        }
    }

    /// Draws `n` samples with the generator seed and splits them into three
    /// disjoint sets, each keeping a single label type.
    pub fn generate(&self, n: usize, partition: Partition) -> Result<GeneratedSets> {
        let fr = [partition.va, partition.expr, partition.au];
        if fr.iter().any(|f| !(*f >= 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("partition fractions {fr:?} must sum to 1")));
        }
        let all = self.draw(n, self.spec.seed);
        let n_va = (partition.va * n as f64).round() as usize;
        let n_expr = ((partition.expr * n as f64).round() as usize).min(n - n_va);
        let mut it = all.into_iter();
        let va = it
            .by_ref()
            .take(n_va)
            .map(|s| HeterogeneousSample { expr: None, au: None, ..s })
            .collect();
        let expr = it
            .by_ref()
            .take(n_expr)
            .map(|s| HeterogeneousSample { va: None, au: None, ..s })
            .collect();
        let au = it
            .map(|s| HeterogeneousSample { va: None, expr: None, ..s })
            .collect();
        Ok(GeneratedSets { va, expr, au })
    }
}

pub fn generate(spec: &GeneratorSpec, n: usize, partition: Partition) -> Result<GeneratedSets> {
    Generator::new(spec.clone())?.generate(n, partition)
}

/// Expression/AU pairs of fully labelled samples, for inferring an
/// empirical relatedness table.
pub fn to_corpus(samples: &[HeterogeneousSample], table: &RelatednessTable) -> CoAnnotatedCorpus {
    CoAnnotatedCorpus {
        class_names: table.class_names().to_vec(),
        label_names: table.label_names().to_vec(),
        samples: samples
            .iter()
            .filter_map(|s| Some((s.expr?, s.au.clone()?)))
            .collect(),
    }
}
