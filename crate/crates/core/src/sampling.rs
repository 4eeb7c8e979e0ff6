//! Mini-batch assembly and triplet/pair mining.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{MdrError, Result};
use crate::losses::TripletSet;
use crate::mdr::PairSet;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    DistanceWeighted,
    UniformRandom,
    AllValid,
}

/// Classes per batch and instances per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub classes_per_batch: usize,
    pub instances_per_class: usize,
}

impl BatchSpec {
    pub fn new(classes_per_batch: usize, instances_per_class: usize) -> Result<Self> {
        if classes_per_batch < 2 || instances_per_class < 2 {
            return Err(MdrError::config(format!(
                "batches need at least 2 classes and 2 instances per class, got {classes_per_batch}x{instances_per_class}"
            )));
        }
        Ok(Self {
            classes_per_batch,
            instances_per_class,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.instances_per_class
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    pub classes_per_batch: usize,
    pub instances_per_class: usize,
    /// Lower clip on unit-sphere distances before weighting.
    pub cutoff: f64,
    /// Upper bound on the inverse-density weight.
    pub clamp: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: SamplingStrategy::DistanceWeighted,
            classes_per_batch: 8,
            instances_per_class: 4,
            cutoff: 0.5,
            clamp: 1e4,
        }
    }
}

impl SamplerConfig {
    pub fn batch_spec(&self) -> Result<BatchSpec> {
        BatchSpec::new(self.classes_per_batch, self.instances_per_class)
    }

    pub fn validate(&self) -> Result<()> {
        self.batch_spec()?;
        if !(self.cutoff > 0.0 && self.cutoff < 2.0) {
            return Err(MdrError::config(format!(
                "sampler.cutoff must lie in (0, 2), got {}",
                self.cutoff
            )));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(MdrError::config(format!(
                "sampler.clamp must be > 0, got {}",
                self.clamp
            )));
        }
        Ok(())
    }
}

/// Random state and settings owned by one training run.
#[derive(Clone, Debug)]
pub struct SamplerState {
    rng: ChaCha8Rng,
    pub strategy: SamplingStrategy,
    pub cutoff: f64,
    pub clamp: f64,
    /// Anchors dropped because no valid negative existed.
    pub skipped_anchors: u64,
}

impl SamplerState {
    pub fn new(config: &SamplerConfig, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            strategy: config.strategy,
            cutoff: config.cutoff,
            clamp: config.clamp,
            skipped_anchors: 0,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Draws `P` distinct classes and `K` instances of each.
///
/// Classes with fewer than `K` instances are sampled with replacement.
pub fn sample_batch(
    dataset: &FeatureDataset,
    spec: &BatchSpec,
    state: &mut SamplerState,
) -> Result<(Tensor, Vec<usize>)> {
    let classes = dataset.classes();
    if classes.len() < spec.classes_per_batch {
        return Err(MdrError::config(format!(
            "batch needs {} classes but the dataset has {}",
            spec.classes_per_batch,
            classes.len()
        )));
    }
    let chosen: Vec<usize> = classes
        .choose_multiple(&mut state.rng, spec.classes_per_batch)
        .copied()
        .collect();
    let mut rows = Vec::with_capacity(spec.batch_size());
    let mut labels = Vec::with_capacity(spec.batch_size());
    for class in chosen {
        let members = dataset.indices_of(class);
        if members.len() >= spec.instances_per_class {
            rows.extend(
                members
                    .choose_multiple(&mut state.rng, spec.instances_per_class)
                    .copied(),
            );
        } else {
            log::debug!(
                "class {class} has {} instances; sampling with replacement",
                members.len()
            );
            for _ in 0..spec.instances_per_class {
                rows.push(*members.choose(&mut state.rng).expect("class has members"));
            }
        }
        labels.extend(std::iter::repeat_n(class, spec.instances_per_class));
    }
    Ok((dataset.features().select_rows(&rows), labels))
}

/// `log q(d)⁻¹` for the density of pairwise distances between uniform points
/// on the unit sphere in `dim` dimensions.
pub fn log_inverse_sphere_density(d: f64, dim: usize) -> f64 {
    let dim = dim as f64;
    let tail = (1.0 - 0.25 * d * d).max(1e-12);
    (2.0 - dim) * d.ln() - 0.5 * (dim - 3.0) * tail.ln()
}

fn unit_rows(embeddings: &Tensor) -> Vec<Vec<f64>> {
    embeddings
        .row_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One triplet per ordered anchor-positive pair, with negatives chosen
/// according to `state.strategy`.
///
/// Distance weighting uses unit-normalized copies of the embeddings; the
/// embeddings themselves are not changed.
pub fn mine_triplets(
    embeddings: &Tensor,
    labels: &[usize],
    state: &mut SamplerState,
) -> TripletSet {
    match state.strategy {
        SamplingStrategy::DistanceWeighted => distance_weighted_triplets(embeddings, labels, state),
        SamplingStrategy::UniformRandom => uniform_triplets(labels, state),
        SamplingStrategy::AllValid => all_valid_triplets(labels),
    }
}

/// Negatives drawn with probability ∝ `min(clamp, q(d)⁻¹)`.
pub fn distance_weighted_triplets(
    embeddings: &Tensor,
    labels: &[usize],
    state: &mut SamplerState,
) -> TripletSet {
    let dim = embeddings.cols();
    let unit = unit_rows(embeddings);
    let log_clamp = state.clamp.ln();
    let mut out = Vec::new();
    for a in 0..labels.len() {
        let negatives: Vec<usize> = (0..labels.len())
            .filter(|&n| labels[n] != labels[a])
            .collect();
        let positives = (0..labels.len()).filter(|&p| p != a && labels[p] == labels[a]);
        if negatives.is_empty() {
            state.skipped_anchors += 1;
            continue;
        }
        let log_w: Vec<f64> = negatives
            .iter()
            .map(|&n| {
                let d = euclidean(&unit[a], &unit[n]).max(state.cutoff);
                log_inverse_sphere_density(d, dim).min(log_clamp)
            })
            .collect();
        let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_w.iter().map(|w| (w - top).exp()).collect();
        let sampler = WeightedIndex::new(&weights).expect("max weight is 1");
        for p in positives {
            out.push((a, p, negatives[sampler.sample(&mut state.rng)]));
        }
    }
    TripletSet::new(out)
}

fn uniform_triplets(labels: &[usize], state: &mut SamplerState) -> TripletSet {
    let mut out = Vec::new();
    for a in 0..labels.len() {
        let negatives: Vec<usize> = (0..labels.len())
            .filter(|&n| labels[n] != labels[a])
            .collect();
        if negatives.is_empty() {
            state.skipped_anchors += 1;
            continue;
        }
        for p in (0..labels.len()).filter(|&p| p != a && labels[p] == labels[a]) {
            out.push((a, p, negatives[state.rng.random_range(0..negatives.len())]));
        }
    }
    TripletSet::new(out)
}

/// Every valid `(a, p, n)` combination.
pub fn all_valid_triplets(labels: &[usize]) -> TripletSet {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            out.extend(
                (0..n)
                    .filter(|&k| labels[k] != labels[a])
                    .map(|k| (a, p, k)),
            );
        }
    }
    TripletSet::new(out)
}

/// All `B(B−1)/2` unordered pairs with their polarity.
pub fn all_pairs(labels: &[usize]) -> PairSet {
    PairSet::all(labels)
}
