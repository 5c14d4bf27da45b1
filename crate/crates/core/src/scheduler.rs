//! Joint batching over sets that each carry one kind of annotation.
//!
//! Every iteration takes one slice from every set, so all loss terms see data,
//! and one epoch visits every sample of every set exactly once.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::HeterogeneousSample;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub set_sizes: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub iterations: usize,
    /// Shuffled sample indices of each set.
    pub orders: Vec<Vec<usize>>,
    pub seed: u64,
}

/// Plans one epoch: `iterations = ceil(max n / max_batch)` and
/// `batch_size_s = ceil(n_s / iterations)`.
///
/// Each set's shuffled order is cut into `iterations` consecutive slices whose
/// lengths differ by at most one, longer slices first. The largest slice is
/// exactly `batch_size_s`, so the short batches come last, and every set with
/// at least `iterations` samples contributes to every iteration.
pub fn plan_epoch(set_sizes: &[usize], max_batch: usize, seed: u64) -> Result<EpochPlan> {
    if set_sizes.is_empty() {
        return Err(Error::Empty("no sets to schedule"));
    }
    if let Some(i) = set_sizes.iter().position(|n| *n == 0) {
        return Err(Error::InvalidArgument(format!("set {i} is empty")));
    }
    if max_batch == 0 {
        return Err(Error::InvalidArgument("max_batch must be at least 1".into()));
    }
    let largest = *set_sizes.iter().max().expect("nonempty");
    let iterations = largest.div_ceil(max_batch);
    let batch_sizes = set_sizes.iter().map(|n| n.div_ceil(iterations)).collect();
    let orders = set_sizes
        .iter()
        .enumerate()
        .map(|(s, &n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect();
    Ok(EpochPlan {
        set_sizes: set_sizes.to_vec(),
        batch_sizes,
        iterations,
        orders,
        seed,
    })
}

/// Seed of epoch `epoch` for a run seeded with `base`.
pub fn epoch_seed(base: u64, epoch: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = base ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl EpochPlan {
    fn slice_bounds(&self, set: usize, iteration: usize) -> (usize, usize) {
        let n = self.set_sizes[set];
        let (q, r) = (n / self.iterations, n % self.iterations);
        let start = iteration * q + iteration.min(r);
        let len = q + usize::from(iteration < r);
        (start, start + len)
    }

    /// Sample indices of `set` used at `iteration`.
    pub fn slice(&self, set: usize, iteration: usize) -> Result<&[usize]> {
        if set >= self.set_sizes.len() {
            return Err(Error::IndexOutOfRange {
                what: "set",
                index: set,
                len: self.set_sizes.len(),
            });
        }
        if iteration >= self.iterations {
            return Err(Error::IndexOutOfRange {
                what: "iteration",
                index: iteration,
                len: self.iterations,
            });
        }
        let (a, b) = self.slice_bounds(set, iteration);
        Ok(&self.orders[set][a..b])
    }

    /// `(set, sample index)` pairs of one joint batch, set by set.
    pub fn joint_indices(&self, iteration: usize) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        for set in 0..self.set_sizes.len() {
            out.extend(self.slice(set, iteration)?.iter().map(|&i| (set, i)));
        }
        Ok(out)
    }

    /// Rejects plans in which `set` would contribute a nonempty slice
    /// smaller than `min`.
    pub fn require_min_slice(&self, set: usize, min: usize) -> Result<()> {
        for it in 0..self.iterations {
            let len = self.slice(set, it)?.len();
            if len > 0 && len < min {
                return Err(Error::Config(format!(
                    "set {set} gets a batch of {len} at iteration {it}; at least {min} required"
                )));
            }
        }
        Ok(())
    }
}

/// A sample of a joint batch, tagged with the set it came from.
#[derive(Debug, Clone, Copy)]
pub struct Tagged<'a> {
    pub set: usize,
    pub sample: &'a HeterogeneousSample,
}

pub fn next_joint_batch<'a>(
    plan: &EpochPlan,
    sets: &[&'a [HeterogeneousSample]],
    iteration: usize,
) -> Result<Vec<Tagged<'a>>> {
    if sets.len() != plan.set_sizes.len()
        || sets.iter().zip(&plan.set_sizes).any(|(s, n)| s.len() != *n)
    {
        return Err(Error::Shape("sets do not match the plan".into()));
    }
    Ok(plan
        .joint_indices(iteration)?
        .into_iter()
        .map(|(set, i)| Tagged {
            set,
            sample: &sets[set][i],
        })
        .collect())
}
