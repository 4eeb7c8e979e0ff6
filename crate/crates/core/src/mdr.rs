//! Multi-level distance regularization.
//!
//! Pairwise distances of a mini-batch are standardized with momentum-averaged
//! statistics, each standardized distance is matched to its nearest learnable
//! level, and the loss is the mean absolute gap between the two. Gradients
//! flow into both the distances and the assigned levels; the running
//! statistics are constants within a step.

use serde::{Deserialize, Serialize};

use crate::embedder::EmbeddingBatch;
use crate::error::{MdrError, Result};
use crate::numerics::{NodeId, ParamId, ParamStore, Tape, Tensor};

/// Added under the square root of squared distances.
pub const DISTANCE_EPS: f64 = 1e-12;
/// Lower bound on the running standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Index pairs over a mini-batch with a same-label flag per pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    pub positive: Vec<bool>,
}

impl PairSet {
    /// Every unordered pair `i < j` exactly once.
    pub fn all(labels: &[usize]) -> Self {
        let n = labels.len();
        let mut set = Self {
            pairs: Vec::with_capacity(n * n.saturating_sub(1) / 2),
            positive: Vec::with_capacity(n * n.saturating_sub(1) / 2),
        };
        for i in 0..n {
            for j in i + 1..n {
                set.push(i, j, labels[i] == labels[j]);
            }
        }
        set
    }

    pub fn push(&mut self, i: usize, j: usize, positive: bool) {
        debug_assert_ne!(i, j, "self pair");
        self.pairs.push((i, j));
        self.positive.push(positive);
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn left(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn right(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// Euclidean distances between rows `left[k]` and `right[k]` of `embeddings`.
pub fn row_distances(
    tape: &mut Tape,
    embeddings: NodeId,
    left: Vec<usize>,
    right: Vec<usize>,
) -> Result<NodeId> {
    let a = tape.select(embeddings, left)?;
    let b = tape.select(embeddings, right)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    let summed = tape.sum_rows(sq)?;
    let guarded = tape.add_scalar(summed, DISTANCE_EPS);
    Ok(tape.sqrt(guarded))
}

/// `‖e_i − e_j‖₂` for every pair, recorded on the tape.
pub fn pairwise_distances(
    tape: &mut Tape,
    batch: &EmbeddingBatch,
    pairs: &PairSet,
) -> Result<NodeId> {
    row_distances(tape, batch.embeddings, pairs.left(), pairs.right())
}

/// Mean and population standard deviation.
pub fn batch_statistics(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Momentum-averaged mean and standard deviation of pairwise distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mu_star: f64,
    pub sigma_star: f64,
    pub gamma: f64,
    pub initialized: bool,
}

impl DistanceStats {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(MdrError::config(format!(
                "momentum must lie in [0, 1), got {gamma}"
            )));
        }
        Ok(Self {
            mu_star: 0.0,
            sigma_star: 1.0,
            gamma,
            initialized: false,
        })
    }

    /// Folds one batch of distances into the running statistics.
    ///
    /// The first batch initializes both statistics directly. Returns `false`
    /// (and leaves the state untouched) when fewer than two distances are given.
    pub fn update(&mut self, distances: &[f64]) -> bool {
        if distances.len() < 2 {
            log::warn!(
                "distance statistics need at least 2 distances, got {}",
                distances.len()
            );
            return false;
        }
        let (mu, sigma) = batch_statistics(distances);
        if self.initialized {
            self.mu_star = self.gamma * self.mu_star + (1.0 - self.gamma) * mu;
            self.sigma_star = self.gamma * self.sigma_star + (1.0 - self.gamma) * sigma;
        } else {
            self.mu_star = mu;
            self.sigma_star = sigma;
            self.initialized = true;
        }
        self.sigma_star = self.sigma_star.max(SIGMA_FLOOR);
        true
    }

    /// `(d − μ*) / σ*` on plain values.
    pub fn normalize_value(&self, d: f64) -> f64 {
        (d - self.mu_star) / self.sigma_star
    }
}

/// `(d − μ*) / σ*` on the tape; gradient flows through `d` only.
pub fn normalize_distances(
    tape: &mut Tape,
    distances: NodeId,
    stats: &DistanceStats,
) -> Result<NodeId> {
    if !stats.initialized {
        return Err(MdrError::Usage(
            "distance statistics used before the first update".into(),
        ));
    }
    let centered = tape.add_scalar(distances, -stats.mu_star);
    Ok(tape.scale(centered, 1.0 / stats.sigma_star))
}

/// Learnable regularization levels, stored as a vector parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSet {
    id: ParamId,
}

impl LevelSet {
    pub const PARAM_NAME: &'static str = "mdr.levels";

    /// Registers the levels; they are never weight-decayed.
    pub fn new(params: &mut ParamStore, init: &[f64]) -> Result<Self> {
        if init.is_empty() {
            return Err(MdrError::config("at least one level is required"));
        }
        if init.windows(2).any(|w| w[0] >= w[1]) || init.iter().any(|v| !v.is_finite()) {
            return Err(MdrError::config(format!(
                "initial levels must be finite and strictly ascending, got {init:?}"
            )));
        }
        let id = params.add(Self::PARAM_NAME, Tensor::vector(init.to_vec()), false);
        Ok(Self { id })
    }

    pub fn param_id(&self) -> ParamId {
        self.id
    }

    pub fn values<'a>(&self, params: &'a ParamStore) -> &'a [f64] {
        params.get(self.id).data()
    }

    /// True once training has moved levels out of ascending order.
    pub fn order_violated(&self, params: &ParamStore) -> bool {
        self.values(params).windows(2).any(|w| w[0] > w[1])
    }
}

/// Index of the level nearest to `d`; ties go to the lowest index.
pub fn assign_level(d: f64, levels: &[f64]) -> usize {
    assert!(!levels.is_empty(), "assign_level needs at least one level");
    let mut best = 0;
    let mut best_gap = (d - levels[0]).abs();
    for (k, &s) in levels.iter().enumerate().skip(1) {
        let gap = (d - s).abs();
        if gap < best_gap {
            best = k;
            best_gap = gap;
        }
    }
    best
}

/// Recorded regularization term with the per-pair level choice.
#[derive(Clone, Debug)]
pub struct MdrTerm {
    pub loss: NodeId,
    pub assignment: Vec<usize>,
}

/// Mean over pairs of `|d̄ − s_assigned|`.
pub fn mdr_loss(tape: &mut Tape, normalized: NodeId, levels: NodeId) -> Result<MdrTerm> {
    let level_values = tape.value(levels).data().to_vec();
    let assignment: Vec<usize> = tape
        .value(normalized)
        .data()
        .iter()
        .map(|&d| assign_level(d, &level_values))
        .collect();
    let targets = tape.select(levels, assignment.clone())?;
    let gap = tape.sub(normalized, targets)?;
    let abs = tape.abs(gap);
    let loss = tape.mean(abs);
    Ok(MdrTerm { loss, assignment })
}

/// Distance of a normalized value to the nearest assignment boundary
/// (midpoint between two levels with distinct values).
pub fn assignment_boundary_margin(d: f64, levels: &[f64]) -> f64 {
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| (d - 0.5 * (w[0] + w[1])).abs())
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER_LEVELS: [f64; 3] = [-3.0, 0.0, 3.0];

    fn batch_of(rows: &[[f64; 2]]) -> (Tape, EmbeddingBatch) {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(rows).unwrap());
        let labels = (0..rows.len()).collect();
        let batch = EmbeddingBatch::new(&tape, e, labels).unwrap();
        (tape, batch)
    }

    #[test]
    fn distance_by_hand() {
        let (mut tape, batch) = batch_of(&[[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]]);
        let pairs = PairSet::all(&batch.labels);
        let d = pairwise_distances(&mut tape, &batch, &pairs).unwrap();
        let v = tape.value(d).data();
        assert!((v[0] - 5.0).abs() < 1e-12);
        assert!(
            v[1] < 1e-5,
            "coincident points give ε-order distance, got {}",
            v[1]
        );
        assert!((v[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn distance_is_symmetric() {
        let (mut tape, batch) = batch_of(&[[0.1, 0.2], [-1.0, 0.7], [2.0, 2.0]]);
        let forward =
            row_distances(&mut tape, batch.embeddings, vec![0, 1, 2], vec![1, 2, 0]).unwrap();
        let backward =
            row_distances(&mut tape, batch.embeddings, vec![1, 2, 0], vec![0, 1, 2]).unwrap();
        assert_eq!(tape.value(forward), tape.value(backward));
    }

    #[test]
    fn momentum_update_by_hand() {
        let mut stats = DistanceStats::new(0.9).unwrap();
        stats.update(&[0.0, 2.0]);
        assert_eq!((stats.mu_star, stats.sigma_star), (1.0, 1.0));
        stats.update(&[1.0, 3.0]);
        assert!((stats.mu_star - 1.1).abs() < 1e-15);
        assert!((stats.sigma_star - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_tracks_batch_exactly() {
        let mut stats = DistanceStats::new(0.0).unwrap();
        stats.update(&[5.0, 1.0, 9.0]);
        stats.update(&[1.0, 2.0, 3.0]);
        let (mu, sigma) = batch_statistics(&[1.0, 2.0, 3.0]);
        assert_eq!((stats.mu_star, stats.sigma_star), (mu, sigma));
    }

    #[test]
    fn constant_batch_floors_sigma() {
        let mut stats = DistanceStats::new(0.0).unwrap();
        stats.update(&[2.0, 2.0, 2.0]);
        assert_eq!(stats.sigma_star, SIGMA_FLOOR);
    }

    #[test]
    fn too_few_distances_leave_stats_unchanged() {
        let mut stats = DistanceStats::new(0.5).unwrap();
        assert!(!stats.update(&[1.0]));
        assert!(!stats.initialized);
    }

    #[test]
    fn momentum_out_of_range_is_rejected() {
        assert!(DistanceStats::new(1.0).is_err());
        assert!(DistanceStats::new(-0.1).is_err());
    }

    #[test]
    fn normalize_small_example() {
        let mut stats = DistanceStats::new(0.0).unwrap();
        stats.update(&[1.0, 2.0, 3.0]);
        assert_eq!(stats.mu_star, 2.0);
        assert!((stats.sigma_star - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let n = normalize_distances(&mut tape, d, &stats).unwrap();
        let v = tape.value(n).data();
        assert!((v[0] + 1.224744871391589).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 1.224744871391589).abs() < 1e-12);
    }

    #[test]
    fn normalize_requires_initialized_stats() {
        let stats = DistanceStats::new(0.9).unwrap();
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(normalize_distances(&mut tape, d, &stats).is_err());
    }

    #[test]
    fn assignment_examples() {
        assert_eq!(PAPER_LEVELS[assign_level(-2.0, &PAPER_LEVELS)], -3.0);
        assert_eq!(assign_level(0.0, &PAPER_LEVELS), 1);
        assert_eq!(assign_level(1.5, &PAPER_LEVELS), 1);
        assert_eq!(assign_level(-1.5, &PAPER_LEVELS), 0);
        assert_eq!(assign_level(100.0, &[0.0]), 0);
    }

    fn loss_for(normalized: &[f64], levels: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::vector(normalized.to_vec()));
        let l = tape.constant(Tensor::vector(levels.to_vec()));
        let term = mdr_loss(&mut tape, d, l).unwrap();
        tape.value(term.loss).item()
    }

    #[test]
    fn mdr_loss_examples() {
        assert_eq!(loss_for(&[1.0], &PAPER_LEVELS), 1.0);
        assert_eq!(loss_for(&[-3.0, 0.0, 3.0, 0.0], &PAPER_LEVELS), 0.0);
        assert_eq!(loss_for(&[-2.0, 2.0], &PAPER_LEVELS), 1.0);
    }

    #[test]
    fn level_gradient_counts_pairs() {
        // Level 0 has one pair below it (-0.5) and two above (0.4, 0.7).
        let mut params = ParamStore::new();
        let levels = LevelSet::new(&mut params, &PAPER_LEVELS).unwrap();
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::vector(vec![-0.5, 0.4, 0.7, 2.9]));
        let l = tape.param(&params, levels.param_id());
        let term = mdr_loss(&mut tape, d, l).unwrap();
        assert_eq!(term.assignment, vec![1, 1, 1, 2]);
        let g = tape.backward(term.loss).unwrap();
        let g = g.get(levels.param_id()).unwrap().data();
        // ∂/∂s_k = (#{d̄ < s_k} − #{d̄ > s_k}) / |P|
        assert_eq!(g, &[0.0, (1.0 - 2.0) / 4.0, 1.0 / 4.0]);
    }

    #[test]
    fn levels_must_ascend() {
        let mut params = ParamStore::new();
        assert!(LevelSet::new(&mut params, &[]).is_err());
        assert!(LevelSet::new(&mut params, &[0.0, -1.0]).is_err());
        let levels = LevelSet::new(&mut params, &[0.0]).unwrap();
        assert!(!params.param(levels.param_id()).decay);
        assert!(!levels.order_violated(&params));
    }

    #[test]
    fn all_pairs_counts() {
        let set = PairSet::all(&[0, 0, 1, 1]);
        assert_eq!(set.len(), 6);
        assert_eq!(set.num_positive(), 2);
        assert_eq!(PairSet::all(&[3, 3, 3]).num_positive(), 3);
    }
}
