//! Retrieval metrics and embedding-space diagnostics.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MdrError, Result};
use crate::mdr::{assign_level, DistanceStats};
use crate::numerics::Tensor;

/// Version of the line-delimited metrics schema.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub recall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    /// `std / mean`; zero when the mean is zero.
    pub cv: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCount {
    pub positive: u64,
    pub negative: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub dml: f64,
    pub mdr: f64,
    pub total: f64,
}

/// Everything measured on one split at one evaluation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub recall: Vec<RecallAt>,
    /// Recall after unit-normalizing the embeddings, when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall_l2: Option<Vec<RecallAt>>,
    pub norms: NormStats,
    pub level_counts: Vec<LevelCount>,
    pub loss: LossComponents,
}

impl SplitMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.recall)
    }
}

/// One evaluation step of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub seed: u64,
    pub step: u64,
    pub levels: Vec<f64>,
    pub mu_star: f64,
    pub sigma_star: f64,
    /// Loss components of the most recent training step.
    pub step_loss: LossComponents,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
    /// Train Recall@1 minus test Recall@1.
    pub gap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Neighbor {
    dist: f64,
    index: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Recall@K of `queries` against a separate `gallery`.
pub fn recall_at_k(
    queries: &Tensor,
    query_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
    ks: &[usize],
) -> Result<Vec<RecallAt>> {
    recall_impl(queries, query_labels, gallery, gallery_labels, ks, false)
}

/// Recall@K where every item queries all the others (self-match excluded).
pub fn recall_at_k_within(
    embeddings: &Tensor,
    labels: &[usize],
    ks: &[usize],
) -> Result<Vec<RecallAt>> {
    recall_impl(embeddings, labels, embeddings, labels, ks, true)
}

fn recall_impl(
    queries: &Tensor,
    query_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
    ks: &[usize],
    exclude_self: bool,
) -> Result<Vec<RecallAt>> {
    if queries.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(MdrError::Usage("embedding and label counts differ".into()));
    }
    if queries.cols() != gallery.cols() {
        return Err(MdrError::Shape {
            op: "recall_at_k",
            left: queries.shape().to_vec(),
            right: gallery.shape().to_vec(),
        });
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(MdrError::config(format!(
            "recall needs positive K values, got {ks:?}"
        )));
    }
    let available = gallery.rows() - usize::from(exclude_self);
    if available == 0 {
        return Err(MdrError::config("recall needs a non-empty gallery"));
    }
    let effective: Vec<usize> = ks
        .iter()
        .map(|&k| {
            if k > available {
                log::warn!("recall@{k} clamped to gallery size {available}");
            }
            k.min(available)
        })
        .collect();
    let depth = *effective.iter().max().expect("non-empty");

    // Rank of the first same-label neighbor among the `depth` nearest.
    let first_hit: Vec<Option<usize>> = (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let query = queries.row(q);
            let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(depth + 1);
            for g in 0..gallery.rows() {
                if exclude_self && g == q {
                    continue;
                }
                let cand = Neighbor {
                    dist: squared_distance(query, gallery.row(g)),
                    index: g,
                };
                if heap.len() < depth {
                    heap.push(cand);
                } else if cand < *heap.peek().expect("full heap") {
                    heap.pop();
                    heap.push(cand);
                }
            }
            heap.into_sorted_vec()
                .iter()
                .position(|n| gallery_labels[n.index] == query_labels[q])
        })
        .collect();

    let n = queries.rows().max(1) as f64;
    Ok(ks
        .iter()
        .zip(&effective)
        .map(|(&k, &eff)| RecallAt {
            k,
            recall: first_hit
                .iter()
                .filter(|r| r.is_some_and(|r| r < eff))
                .count() as f64
                / n,
        })
        .collect())
}

/// Summary of per-row two-norms.
pub fn norm_statistics(embeddings: &Tensor) -> NormStats {
    let norms: Vec<f64> = embeddings
        .row_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let n = norms.len().max(1) as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let std = (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    NormStats {
        mean,
        std,
        cv: if mean > 0.0 { std / mean } else { 0.0 },
    }
}

/// Per-level counts of positive and negative pairs by nearest level.
pub fn level_histogram(normalized: &[f64], positive: &[bool], levels: &[f64]) -> Vec<LevelCount> {
    let mut counts = vec![LevelCount::default(); levels.len()];
    for (&d, &pos) in normalized.iter().zip(positive) {
        let c = &mut counts[assign_level(d, levels)];
        if pos {
            c.positive += 1;
        } else {
            c.negative += 1;
        }
    }
    counts
}

/// Level histogram over every unordered pair of a whole split.
pub fn split_level_histogram(
    embeddings: &Tensor,
    labels: &[usize],
    stats: &DistanceStats,
    levels: &[f64],
) -> Vec<LevelCount> {
    let n = embeddings.rows();
    let per_row: Vec<Vec<LevelCount>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut counts = vec![LevelCount::default(); levels.len()];
            for j in i + 1..n {
                let d = squared_distance(embeddings.row(i), embeddings.row(j)).sqrt();
                let c = &mut counts[assign_level(stats.normalize_value(d), levels)];
                if labels[i] == labels[j] {
                    c.positive += 1;
                } else {
                    c.negative += 1;
                }
            }
            counts
        })
        .collect();
    let mut total = vec![LevelCount::default(); levels.len()];
    for row in per_row {
        for (t, c) in total.iter_mut().zip(row) {
            t.positive += c.positive;
            t.negative += c.negative;
        }
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub step: u64,
    pub train_recall_at_1: f64,
    pub test_recall_at_1: f64,
    pub gap: f64,
}

/// Train minus test Recall@1 per evaluation step. Both series are
/// `(step, recall@1)` and must cover the same steps.
pub fn generalization_gap(train: &[(u64, f64)], test: &[(u64, f64)]) -> Result<Vec<GapPoint>> {
    if train.len() != test.len() || train.iter().zip(test).any(|(a, b)| a.0 != b.0) {
        return Err(MdrError::Usage(
            "train and test metrics must be evaluated at the same steps".into(),
        ));
    }
    Ok(train
        .iter()
        .zip(test)
        .map(|(&(step, tr), &(_, te))| GapPoint {
            step,
            train_recall_at_1: tr,
            test_recall_at_1: te,
            gap: tr - te,
        })
        .collect())
}

/// Gap series of a metrics stream.
pub fn gap_series(records: &[MetricsRecord]) -> Result<Vec<GapPoint>> {
    let r1 = |m: &SplitMetrics| m.recall_at(1).unwrap_or(f64::NAN);
    let train: Vec<_> = records.iter().map(|r| (r.step, r1(&r.train))).collect();
    let test: Vec<_> = records.iter().map(|r| (r.step, r1(&r.test))).collect();
    generalization_gap(&train, &test)
}
