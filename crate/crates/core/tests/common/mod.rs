#![allow(dead_code)]

use mdr_core::experiment::ExperimentConfig;

/// A run small enough to train in well under a second.
pub fn small_config(name: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.run.name = name.into();
    c.run.seeds = vec![0];
    c.dataset.classes = 12;
    c.dataset.per_class = 10;
    c.dataset.dim = 8;
    c.dataset.cluster_std = 0.2;
    c.embedder.hidden = vec![16];
    c.embedder.embedding_dim = 8;
    c.sampler.classes_per_batch = 4;
    c.sampler.instances_per_class = 3;
    c.optimizer.steps = 20;
    c.optimizer.eval_interval = 10;
    c
}
