//! The α-mixture sampling distribution, label queries and the
//! importance-weighted empirical risk.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::fisher_design::{SamplePool, SimplexDist};
use crate::models::{Feature, Label, LikelihoodModel, ParamVec};

/// `Γ̄ = α Γ̂* + (1 − α) U`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDist {
    weights: SimplexDist,
    alpha: f64,
}

impl MixtureDist {
    pub fn weights(&self) -> &SimplexDist {
        &self.weights
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn pool_size(&self) -> usize {
        self.weights.len()
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.weights.prob(i)
    }
}

/// Blends a design with the uniform distribution so that every pool element
/// keeps probability at least `(1 − α)/N`.
pub fn mix(gamma_star: &SimplexDist, alpha: f64) -> Result<MixtureDist> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = gamma_star.len();
    let floor = (1.0 - alpha) / n as f64;
    let weights = gamma_star.weights().iter().map(|w| alpha * w + floor).collect();
    Ok(MixtureDist {
        weights: SimplexDist::renormalized(weights),
        alpha,
    })
}

/// One queried label together with its draw-time probability.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub pool_index: usize,
    pub x: Feature,
    pub y: Label,
    pub sampling_prob: f64,
}

/// The labeled set obtained at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    samples: Vec<LabeledSample>,
    replacement: bool,
}

impl LabeledBatch {
    pub fn new(samples: Vec<LabeledSample>, replacement: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("labeled batch must not be empty"));
        }
        if let Some(s) = samples.iter().find(|s| !(s.sampling_prob > 0.0)) {
            return Err(Error::invalid(format!(
                "sample {} has non-positive probability {}",
                s.pool_index, s.sampling_prob
            )));
        }
        if !replacement {
            let mut seen: Vec<usize> = samples.iter().map(|s| s.pool_index).collect();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid("duplicate pool index in a without-replacement batch"));
            }
        }
        Ok(LabeledBatch {
            samples,
            replacement,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn replacement(&self) -> bool {
        self.replacement
    }

    /// Every other sample starting at `offset` (0 or 1); used for sample splitting.
    pub fn split_half(&self, offset: usize) -> Option<LabeledBatch> {
        let samples: Vec<_> = self.samples.iter().skip(offset).step_by(2).cloned().collect();
        (!samples.is_empty()).then_some(LabeledBatch {
            samples,
            replacement: self.replacement,
        })
    }
}

/// `K` i.i.d. categorical draws from the mixture.
pub fn draw_with_replacement(dist: &MixtureDist, k: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let index = WeightedIndex::new(dist.weights().weights())
        .map_err(|e| Error::invalid(format!("mixture weights: {e}")))?;
    Ok((0..k).map(|_| index.sample(rng)).collect())
}

/// Indices of the `K` largest mixture weights, largest first, lower index on ties.
pub fn draw_top_k(dist: &MixtureDist, k: usize) -> Result<Vec<usize>> {
    let n = dist.pool_size();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("top-K needs 1 <= K <= N = {n}, got {k}")));
    }
    let w = dist.weights().weights();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Source of labels for queried pool elements.
pub trait LabelSource {
    fn label(&mut self, t: usize, pool_index: usize, x: &Feature) -> Result<Label>;
}

/// Queries labels for the drawn indices and records their draw-time probabilities.
pub fn query_labels(
    pool: &SamplePool,
    dist: &MixtureDist,
    indices: &[usize],
    replacement: bool,
    labels: &mut dyn LabelSource,
) -> Result<LabeledBatch> {
    if dist.pool_size() != pool.len() {
        return Err(Error::SizeMismatch {
            expected: pool.len(),
            actual: dist.pool_size(),
        });
    }
    let samples = indices
        .iter()
        .map(|&i| {
            let x = pool.get(i).clone();
            let y = labels.label(pool.time_index(), i, &x)?;
            Ok(LabeledSample {
                pool_index: i,
                x,
                y,
                sampling_prob: dist.prob(i),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledBatch::new(samples, replacement)
}

/// `L̂(θ) = (1/K) Σ ℓ(y_k | x_k, θ) / (N Γ̄(x_k))`.
///
/// Unbiased for the pool-uniform risk when the batch was drawn with
/// replacement; biased in top-K mode.
pub fn weighted_empirical_loss<M: LikelihoodModel + ?Sized>(
    model: &M,
    batch: &LabeledBatch,
    theta: &ParamVec,
    pool_size: usize,
) -> f64 {
    let n = pool_size as f64;
    let total: f64 = batch
        .samples()
        .iter()
        .map(|s| model.loss(&s.x, s.y, theta) / (n * s.sampling_prob))
        .sum();
    total / batch.len() as f64
}
