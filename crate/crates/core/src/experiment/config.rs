//! Declarative description of a training run.
//!
//! Configs are TOML with one table per section. Every field has a default,
//! unknown keys are rejected, and [`ExperimentConfig::validate`] runs before
//! any computation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, ClassSplit, FeatureDataset, SplitSpec};
use crate::error::{MdrError, Result};
use crate::losses::LossConfig;
use crate::numerics::AdamConfig;
use crate::sampling::SamplerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Feature file for `source = "file"`.
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub cluster_std: f64,
    pub separation: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            path: None,
            classes: 60,
            per_class: 60,
            dim: 32,
            cluster_std: 0.2,
            separation: 1.0,
            seed: 0,
            train_fraction: 0.5,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            embedding_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdrConfig {
    pub enabled: bool,
    pub levels: Vec<f64>,
    pub gamma: f64,
}

impl Default for MdrConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            levels: vec![-3.0, 0.0, 3.0],
            gamma: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub eval_interval: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            steps: 2000,
            eval_interval: 500,
            checkpoint_interval: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub ks: Vec<usize>,
    /// Also report recall on unit-normalized embeddings.
    pub l2_pass: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 4, 8],
            l2_pass: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub dataset: DatasetConfig,
    pub embedder: EmbedderConfig,
    pub loss: LossConfig,
    pub mdr: MdrConfig,
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MdrError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            MdrError::Config(msg) => MdrError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fully resolved TOML, defaults included.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MdrError::Config(m));
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return fail(format!(
                "run.name must be a plain non-empty name, got '{}'",
                self.run.name
            ));
        }
        if self.run.seeds.is_empty() {
            return fail("run.seeds must list at least one seed".into());
        }
        let mut seeds = self.run.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.run.seeds.len() {
            return fail("run.seeds contains duplicates".into());
        }

        let d = &self.dataset;
        match d.source {
            DatasetSource::Synthetic => {
                if d.classes < 2 || d.per_class < 1 || d.dim < 1 {
                    return fail(
                        "dataset needs >= 2 classes, >= 1 instance per class and dim >= 1".into(),
                    );
                }
                if !(d.cluster_std >= 0.0) || !(d.separation > 0.0) {
                    return fail(
                        "dataset.cluster_std must be >= 0 and dataset.separation > 0".into(),
                    );
                }
            }
            DatasetSource::File if d.path.is_none() => {
                return fail("dataset.path is required when dataset.source = \"file\"".into())
            }
            DatasetSource::File => {}
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return fail(format!(
                "dataset.train_fraction must lie in (0, 1), got {}",
                d.train_fraction
            ));
        }

        if self.embedder.embedding_dim == 0 || self.embedder.hidden.contains(&0) {
            return fail("embedder widths must be positive".into());
        }

        self.loss.validate()?;
        if self.mdr.enabled {
            if self.loss.l2_norm {
                return fail("loss.l2_norm cannot be combined with mdr.enabled".into());
            }
            if self.mdr.levels.is_empty() {
                return fail("mdr.levels must not be empty".into());
            }
            if self.mdr.levels.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!(
                    "mdr.levels must be strictly ascending, got {:?}",
                    self.mdr.levels
                ));
            }
        } else if self.loss.trick {
            return fail("loss.trick requires mdr.enabled".into());
        }
        if !(0.0..1.0).contains(&self.mdr.gamma) {
            return fail(format!(
                "mdr.gamma must lie in [0, 1), got {}",
                self.mdr.gamma
            ));
        }

        self.sampler.validate()?;

        let o = &self.optimizer;
        if !(o.lr > 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
        {
            return fail("optimizer needs lr > 0, beta1/beta2 in [0, 1) and eps > 0".into());
        }
        if !(o.weight_decay >= 0.0) {
            return fail("optimizer.weight_decay must be >= 0".into());
        }
        if o.eval_interval == 0 {
            return fail("optimizer.eval_interval must be >= 1".into());
        }

        if self.evaluation.ks.is_empty() || self.evaluation.ks.contains(&0) {
            return fail("evaluation.ks must list positive K values".into());
        }
        Ok(())
    }

    /// Embedder widths from input to output.
    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.embedder.hidden);
        w.push(self.embedder.embedding_dim);
        w
    }

    pub fn load_dataset(&self) -> Result<FeatureDataset> {
        let d = &self.dataset;
        match d.source {
            DatasetSource::Synthetic => data::generate_synthetic(
                d.classes,
                d.per_class,
                d.dim,
                d.cluster_std,
                d.separation,
                d.seed,
            ),
            DatasetSource::File => data::load_features(d.path.as_deref().expect("validated")),
        }
    }

    /// Class-disjoint `(train, test)` splits of the configured dataset.
    pub fn load_splits(&self) -> Result<(FeatureDataset, FeatureDataset)> {
        let ds = self.load_dataset()?;
        let spec = SplitSpec {
            classes: ClassSplit::Fraction(self.dataset.train_fraction),
            seed: self.dataset.split_seed,
        };
        data::split_disjoint(&ds, &spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let config = ExperimentConfig::default();
        config.validate().unwrap();
        let text = config.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), config);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let config =
            ExperimentConfig::from_toml_str("[loss]\nlambda = 0.2\n[run]\nname = \"cars\"\n")
                .unwrap();
        assert_eq!(config.loss.lambda, 0.2);
        assert_eq!(config.mdr.gamma, 0.9);
        assert_eq!(config.run.seeds.len(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[loss]\nlamda = 0.2\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[losses]\n").is_err());
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let err = ExperimentConfig::from_toml_str("[run]\nseeds = []\n").unwrap_err();
        assert!(matches!(err, MdrError::Config(_)));
    }

    #[test]
    fn baseline_combinations() {
        let l2 = "[mdr]\nenabled = false\n[loss]\ntrick = false\nl2_norm = true\nlambda = 0.0\n";
        ExperimentConfig::from_toml_str(l2).unwrap();
        assert!(ExperimentConfig::from_toml_str("[mdr]\nenabled = false\n").is_err());
        assert!(
            ExperimentConfig::from_toml_str("[loss]\ntrick = false\nl2_norm = true\n").is_err()
        );
        assert!(ExperimentConfig::from_toml_str("[mdr]\nlevels = [0.0, -1.0]\n").is_err());
    }
}
