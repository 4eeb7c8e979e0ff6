use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::embedder::MlpEmbedder;
use crate::error::{MdrError, Result};
use crate::mdr::{DistanceStats, LevelSet};
use crate::numerics::{AdamState, ParamId, ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "mdr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything a run needs to continue or be evaluated: parameters, optimizer
/// moments, running distance statistics and the config that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub step: u64,
    pub params: ParamStore,
    pub embedder: MlpEmbedder,
    pub levels: LevelSet,
    pub beta: Option<ParamId>,
    pub adam: AdamState,
    pub stats: DistanceStats,
}

impl TrainingState {
    pub fn new(config: &ExperimentConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let embedder = MlpEmbedder::new(&config.widths(input_dim), &mut params, seed)?;
        let levels = LevelSet::new(&mut params, &config.mdr.levels)?;
        let beta = (config.loss.kind == crate::losses::LossKind::Margin).then(|| {
            params.add(
                "loss.beta",
                Tensor::vector(vec![config.loss.beta_init]),
                false,
            )
        });
        let adam = AdamState::new(config.optimizer.adam(), &params);
        Ok(Self {
            config: config.clone(),
            seed,
            step: 0,
            params,
            embedder,
            levels,
            beta,
            adam,
            stats: DistanceStats::new(config.mdr.gamma)?,
        })
    }

    pub fn level_values(&self) -> &[f64] {
        self.levels.values(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            state: self,
        };
        let text = serde_json::to_string(&doc)?;
        std::fs::write(path, text).map_err(|e| MdrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MdrError::io(path, e))?;
        let doc: Checkpoint = serde_json::from_str(&text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(MdrError::Checkpoint(format!(
                "{} is not a checkpoint",
                path.display()
            )));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(MdrError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                doc.version
            )));
        }
        let state = doc.state;
        if state.params.iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(MdrError::Checkpoint(
                "checkpoint holds non-finite parameters".into(),
            ));
        }
        Ok(state)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    state: &'a TrainingState,
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    state: TrainingState,
}
