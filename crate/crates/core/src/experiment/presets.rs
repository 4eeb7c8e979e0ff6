//! Ready-made comparison sets derived from a base config.

use super::ExperimentConfig;
use crate::losses::LossKind;

/// Base loss with the regularizer and the normalization trick on.
pub fn with_mdr(base: &ExperimentConfig, name: &str) -> ExperimentConfig {
    let mut c = base.clone();
    c.run.name = name.into();
    c.mdr.enabled = true;
    c.loss.trick = true;
    c.loss.l2_norm = false;
    c
}

/// Base loss on raw embeddings: no regularizer, no normalization.
pub fn unnormalized(base: &ExperimentConfig, name: &str) -> ExperimentConfig {
    let mut c = base.clone();
    c.run.name = name.into();
    c.mdr.enabled = false;
    c.loss.trick = false;
    c.loss.l2_norm = false;
    c
}

/// Conventional baseline with unit-normalized embeddings.
pub fn l2_normalized(base: &ExperimentConfig, name: &str) -> ExperimentConfig {
    let mut c = unnormalized(base, name);
    c.loss.l2_norm = true;
    c
}

/// Triplet with and without the regularizer, plus the L2 baseline.
pub fn mdr_comparison(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    vec![
        with_mdr(base, "triplet_mdr"),
        unnormalized(base, "triplet"),
        l2_normalized(base, "triplet_l2norm"),
    ]
}

/// Initial level configurations `{−3,0,3}`, `{−1,0,1}` and `{0}`.
pub fn level_sweep(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    [
        ("levels_wide", vec![-3.0, 0.0, 3.0]),
        ("levels_tight", vec![-1.0, 0.0, 1.0]),
        ("levels_single", vec![0.0]),
    ]
    .into_iter()
    .map(|(name, levels)| {
        let mut c = with_mdr(base, name);
        c.mdr.levels = levels;
        c
    })
    .collect()
}

/// Regularization weights 0, 0.1, 0.2 and 0.6.
pub fn lambda_sweep(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    [0.0, 0.1, 0.2, 0.6]
        .into_iter()
        .map(|lambda| {
            let mut c = with_mdr(base, &format!("lambda_{lambda}"));
            c.loss.lambda = lambda;
            c
        })
        .collect()
}

/// Each base loss with and without the regularizer.
pub fn loss_sweep(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    [LossKind::Triplet, LossKind::Contrastive, LossKind::Margin]
        .into_iter()
        .flat_map(|kind| {
            let mut b = base.clone();
            b.loss.kind = kind;
            [
                with_mdr(&b, &format!("{kind}_mdr")),
                unnormalized(&b, &format!("{kind}")),
            ]
        })
        .collect()
}
