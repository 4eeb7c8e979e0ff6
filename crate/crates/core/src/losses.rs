//! Base metric-learning losses and the combined objective.

use serde::{Deserialize, Serialize};

use crate::embedder::{l2_normalize, EmbeddingBatch};
use crate::error::{MdrError, Result};
use crate::mdr::{self, DistanceStats, MdrTerm, PairSet};
use crate::numerics::{NodeId, Tape, Tensor};

/// Smallest running mean distance the normalization trick accepts.
pub const TRICK_MIN_MU: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    Contrastive,
    Margin,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Triplet => "triplet",
            LossKind::Contrastive => "contrastive",
            LossKind::Margin => "margin",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    /// Weight of the regularization term.
    pub lambda: f64,
    /// Divide embeddings by the running mean distance inside the base loss.
    pub trick: bool,
    /// Unit-normalize embeddings before the base loss (conventional baseline).
    pub l2_norm: bool,
    /// Initial boundary of the margin loss.
    pub beta_init: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Triplet,
            margin: 0.2,
            lambda: 0.6,
            trick: true,
            l2_norm: false,
            beta_init: 1.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(MdrError::config(format!(
                "loss.lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(MdrError::config(format!(
                "loss.margin must be > 0, got {}",
                self.margin
            )));
        }
        if self.trick && self.l2_norm {
            return Err(MdrError::config(
                "loss.trick and loss.l2_norm are mutually exclusive",
            ));
        }
        if self.kind == LossKind::Margin && !(self.beta_init > 0.0) {
            return Err(MdrError::config(format!(
                "loss.beta_init must be > 0, got {}",
                self.beta_init
            )));
        }
        Ok(())
    }
}

/// Anchor/positive/negative index triples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletSet {
    pub triplets: Vec<(usize, usize, usize)>,
}

impl TripletSet {
    pub fn new(triplets: Vec<(usize, usize, usize)>) -> Self {
        Self { triplets }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Checks `label(a) = label(p) ≠ label(n)` and `a ≠ p` for every triple.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        for &(a, p, n) in &self.triplets {
            let ok = a != p
                && a.max(p).max(n) < labels.len()
                && labels[a] == labels[p]
                && labels[a] != labels[n];
            if !ok {
                return Err(MdrError::Usage(format!("invalid triplet ({a}, {p}, {n})")));
            }
        }
        Ok(())
    }

    /// Splits each triple into a positive `(a, p)` and a negative `(a, n)` pair.
    pub fn to_pairs(&self) -> PairSet {
        let mut pairs = PairSet::default();
        for &(a, p, n) in &self.triplets {
            pairs.push(a, p, true);
            pairs.push(a, n, false);
        }
        pairs
    }
}

fn zero_loss(tape: &mut Tape, what: &str) -> NodeId {
    log::warn!("{what}: nothing to compare; loss is 0 with no gradient signal");
    tape.constant(Tensor::scalar(0.0))
}

/// Mean over triples of `[d(a,p) − d(a,n) + m]₊`.
pub fn triplet_loss(
    tape: &mut Tape,
    batch: &EmbeddingBatch,
    triplets: &TripletSet,
    margin: f64,
) -> Result<NodeId> {
    if triplets.is_empty() {
        return Ok(zero_loss(tape, "triplet loss"));
    }
    let anchors: Vec<usize> = triplets.triplets.iter().map(|t| t.0).collect();
    let positives = triplets.triplets.iter().map(|t| t.1).collect();
    let negatives = triplets.triplets.iter().map(|t| t.2).collect();
    let d_ap = mdr::row_distances(tape, batch.embeddings, anchors.clone(), positives)?;
    let d_an = mdr::row_distances(tape, batch.embeddings, anchors, negatives)?;
    let gap = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinged = tape.hinge(shifted);
    Ok(tape.mean(hinged))
}

fn polarity(pairs: &PairSet, pos: f64, neg: f64) -> Tensor {
    Tensor::vector(
        pairs
            .positive
            .iter()
            .map(|&p| if p { pos } else { neg })
            .collect(),
    )
}

/// Mean over pairs of `d²` (positives) or `[m − d]₊²` (negatives).
pub fn contrastive_loss(
    tape: &mut Tape,
    batch: &EmbeddingBatch,
    pairs: &PairSet,
    margin: f64,
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Ok(zero_loss(tape, "contrastive loss"));
    }
    let d = mdr::pairwise_distances(tape, batch, pairs)?;
    let pull = tape.square(d);
    let flipped = tape.scale(d, -1.0);
    let slack = tape.add_scalar(flipped, margin);
    let hinged = tape.hinge(slack);
    let push = tape.square(hinged);
    let pos_mask = tape.constant(polarity(pairs, 1.0, 0.0));
    let neg_mask = tape.constant(polarity(pairs, 0.0, 1.0));
    let pull = tape.mul(pull, pos_mask)?;
    let push = tape.mul(push, neg_mask)?;
    let per_pair = tape.add(pull, push)?;
    Ok(tape.mean(per_pair))
}

/// `[m + d − β]₊` for positives and `[m + β − d]₊` for negatives, averaged
/// over the pairs whose hinge is active.
///
/// `beta` is a single-entry node, normally the trainable boundary parameter.
pub fn margin_loss(
    tape: &mut Tape,
    batch: &EmbeddingBatch,
    pairs: &PairSet,
    margin: f64,
    beta: NodeId,
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Ok(zero_loss(tape, "margin loss"));
    }
    let d = mdr::pairwise_distances(tape, batch, pairs)?;
    let offset = tape.sub(d, beta)?;
    let sign = tape.constant(polarity(pairs, 1.0, -1.0));
    let signed = tape.mul(offset, sign)?;
    let shifted = tape.add_scalar(signed, margin);
    let hinged = tape.hinge(shifted);
    let active = tape
        .value(hinged)
        .data()
        .iter()
        .filter(|&&v| v > 0.0)
        .count();
    let total = tape.sum(hinged);
    Ok(tape.scale(total, 1.0 / active.max(1) as f64))
}

/// Divides the embeddings by the running mean distance `μ*` (a constant
/// within the step), so the expected pairwise distance seen by the base
/// loss is one.
pub fn apply_trick(
    tape: &mut Tape,
    batch: &EmbeddingBatch,
    stats: &DistanceStats,
) -> Result<EmbeddingBatch> {
    if !stats.initialized {
        return Err(MdrError::Usage(
            "normalization trick used before distance statistics exist".into(),
        ));
    }
    if stats.mu_star < TRICK_MIN_MU {
        return Err(MdrError::Collapsed(stats.mu_star));
    }
    let scaled = tape.scale(batch.embeddings, 1.0 / stats.mu_star);
    Ok(batch.with_embeddings(scaled))
}

/// `L_DML + λ · L_MDR`.
pub fn combined_loss(tape: &mut Tape, dml: NodeId, mdr: NodeId, lambda: f64) -> Result<NodeId> {
    let weighted = tape.scale(mdr, lambda);
    tape.add(dml, weighted)
}

/// Pairs or triplets chosen for the base loss of one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mined {
    Triplets(TripletSet),
    Pairs(PairSet),
}

impl Mined {
    fn pairs(&self) -> PairSet {
        match self {
            Mined::Triplets(t) => t.to_pairs(),
            Mined::Pairs(p) => p.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Mined::Triplets(t) => t.len(),
            Mined::Pairs(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Trainable inputs of the objective beyond the embeddings.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveParams {
    /// Level vector; `None` disables the regularizer.
    pub levels: Option<NodeId>,
    /// Margin-loss boundary; required for [`LossKind::Margin`].
    pub beta: Option<NodeId>,
}

/// Recorded loss components of one step.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: NodeId,
    pub dml: NodeId,
    pub mdr: Option<MdrTerm>,
    /// Raw all-pairs distances used by the regularizer.
    pub distances: NodeId,
    pub normalized: Option<NodeId>,
}

/// Builds the full per-step objective on the tape.
///
/// `stats` must already include the current batch. The regularizer sees raw
/// distances standardized by `stats`; the base loss sees embeddings after the
/// optional trick or L2 normalization.
pub fn objective(
    tape: &mut Tape,
    batch: &EmbeddingBatch,
    mined: &Mined,
    stats: &DistanceStats,
    params: ObjectiveParams,
    config: &LossConfig,
) -> Result<Objective> {
    let all_pairs = PairSet::all(&batch.labels);
    let distances = mdr::pairwise_distances(tape, batch, &all_pairs)?;

    let (mdr_term, normalized) = match params.levels {
        Some(levels) => {
            let normalized = mdr::normalize_distances(tape, distances, stats)?;
            (
                Some(mdr::mdr_loss(tape, normalized, levels)?),
                Some(normalized),
            )
        }
        None => (None, None),
    };

    let dml_batch = if config.l2_norm {
        l2_normalize(tape, batch)?
    } else if config.trick {
        apply_trick(tape, batch, stats)?
    } else {
        batch.clone()
    };

    let dml = match (config.kind, mined) {
        (LossKind::Triplet, Mined::Triplets(t)) => {
            triplet_loss(tape, &dml_batch, t, config.margin)?
        }
        (LossKind::Triplet, Mined::Pairs(_)) => {
            return Err(MdrError::Usage("triplet loss needs mined triplets".into()))
        }
        (LossKind::Contrastive, m) => {
            contrastive_loss(tape, &dml_batch, &m.pairs(), config.margin)?
        }
        (LossKind::Margin, m) => {
            let beta = params
                .beta
                .ok_or_else(|| MdrError::Usage("margin loss needs a beta parameter".into()))?;
            margin_loss(tape, &dml_batch, &m.pairs(), config.margin, beta)?
        }
    };

    let total = match &mdr_term {
        Some(term) => combined_loss(tape, dml, term.loss, config.lambda)?,
        None => dml,
    };
    Ok(Objective {
        total,
        dml,
        mdr: mdr_term,
        distances,
        normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Anchor at the origin, positive and negative on the x axis.
    fn line_batch(d_ap: f64, d_an: f64) -> (Tape, EmbeddingBatch) {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(&[[0.0, 0.0], [d_ap, 0.0], [-d_an, 0.0]]).unwrap());
        let batch = EmbeddingBatch::new(&tape, e, vec![0, 0, 1]).unwrap();
        (tape, batch)
    }

    fn triplet_value(d_ap: f64, d_an: f64) -> f64 {
        let (mut tape, batch) = line_batch(d_ap, d_an);
        let t = TripletSet::new(vec![(0, 1, 2)]);
        let l = triplet_loss(&mut tape, &batch, &t, 0.2).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_value(0.5, 0.9), 0.0);
        assert!((triplet_value(1.0, 0.9) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn satisfied_triplets_have_zero_gradient() {
        let mut params = crate::numerics::ParamStore::new();
        let id = params.add(
            "e",
            Tensor::from_rows(&[[0.0, 0.0], [0.1, 0.0], [-2.0, 0.0]]).unwrap(),
            false,
        );
        let mut tape = Tape::new();
        let e = tape.param(&params, id);
        let batch = EmbeddingBatch::new(&tape, e, vec![0, 0, 1]).unwrap();
        let t = TripletSet::new(vec![(0, 1, 2), (1, 0, 2)]);
        let l = triplet_loss(&mut tape, &batch, &t, 0.2).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(id).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_triplets_give_zero() {
        let (mut tape, batch) = line_batch(1.0, 1.0);
        let l = triplet_loss(&mut tape, &batch, &TripletSet::default(), 0.2).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn triplet_validation() {
        let labels = [0, 0, 1];
        assert!(TripletSet::new(vec![(0, 1, 2)]).validate(&labels).is_ok());
        assert!(TripletSet::new(vec![(0, 0, 2)]).validate(&labels).is_err());
        assert!(TripletSet::new(vec![(0, 2, 1)]).validate(&labels).is_err());
    }

    fn contrastive_value(d: f64, positive: bool) -> f64 {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(&[[0.0], [d]]).unwrap());
        let batch = EmbeddingBatch::new(&tape, e, vec![0, if positive { 0 } else { 1 }]).unwrap();
        let pairs = PairSet::all(&batch.labels);
        let l = contrastive_loss(&mut tape, &batch, &pairs, 0.2).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn contrastive_examples() {
        assert!(contrastive_value(0.0, true) < 1e-11);
        assert_eq!(contrastive_value(0.2, false), 0.0);
        assert_eq!(contrastive_value(0.5, false), 0.0);
        assert!((contrastive_value(0.1, false) - 0.01).abs() < 1e-12);
    }

    fn margin_value(d: f64, positive: bool, beta: f64) -> f64 {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(&[[0.0], [d]]).unwrap());
        let batch = EmbeddingBatch::new(&tape, e, vec![0, if positive { 0 } else { 1 }]).unwrap();
        let pairs = PairSet::all(&batch.labels);
        let b = tape.constant(Tensor::vector(vec![beta]));
        let l = margin_loss(&mut tape, &batch, &pairs, 0.2, b).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn margin_examples() {
        assert!((margin_value(1.4, true, 1.2) - 0.4).abs() < 1e-12);
        assert!(margin_value(1.0, true, 1.2).abs() < 1e-12);
        assert!(margin_value(1.4, false, 1.2).abs() < 1e-12);
        assert!((margin_value(1.0, false, 1.2) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn trick_divides_by_running_mean() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(&[[2.0, 4.0], [0.0, 0.0]]).unwrap());
        let batch = EmbeddingBatch::new(&tape, e, vec![0, 1]).unwrap();
        let stats = DistanceStats {
            mu_star: 2.0,
            sigma_star: 1.0,
            gamma: 0.9,
            initialized: true,
        };
        let scaled = apply_trick(&mut tape, &batch, &stats).unwrap();
        assert_eq!(tape.value(scaled.embeddings).row(0), &[1.0, 2.0]);

        let unit = DistanceStats {
            mu_star: 1.0,
            ..stats.clone()
        };
        let same = apply_trick(&mut tape, &batch, &unit).unwrap();
        assert_eq!(tape.value(same.embeddings), tape.value(batch.embeddings));

        let collapsed = DistanceStats {
            mu_star: 1e-9,
            ..stats
        };
        assert!(matches!(
            apply_trick(&mut tape, &batch, &collapsed),
            Err(MdrError::Collapsed(_))
        ));
    }

    #[test]
    fn combined_examples() {
        let mut tape = Tape::new();
        let dml = tape.constant(Tensor::scalar(0.3));
        let reg = tape.constant(Tensor::scalar(1.0));
        let off = combined_loss(&mut tape, dml, reg, 0.0).unwrap();
        assert_eq!(tape.value(off).item(), 0.3);
        let on = combined_loss(&mut tape, dml, reg, 0.2).unwrap();
        assert!((tape.value(on).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let both = LossConfig {
            trick: true,
            l2_norm: true,
            ..LossConfig::default()
        };
        assert!(both.validate().is_err());
        assert!(LossConfig {
            lambda: -0.1,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            margin: 0.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            lambda: 0.6,
            ..LossConfig::default()
        }
        .validate()
        .is_ok());
    }
}
