//! Experiment runner: configs, the training loop, checkpoints, manifests
//! and comparison matrices.
//!
//! Output layout under the output root (`MDR_OUTPUT_ROOT`, default `runs`):
//!
//! ```text
//! <run.name>/config.toml
//! <run.name>/manifest.json
//! <run.name>/seed-<s>/metrics.jsonl
//! <run.name>/seed-<s>/checkpoint.json
//! ```

mod config;
mod matrix;
pub mod presets;
mod run;
mod state;
mod train;

use std::path::PathBuf;

pub use config::{
    DatasetConfig, DatasetSource, EmbedderConfig, EvaluationConfig, ExperimentConfig, MdrConfig,
    OptimizerConfig, RunConfig,
};
pub use matrix::{load_config_dir, run_matrix, MatrixReport, MatrixRow};
pub use run::{
    config_hash, evaluate, inspect, read_metrics, run_seeds, tool_version, train, EvaluationReport,
    FinalMetrics, Inspection, MeanStd, RunManifest, SeedRun, SplitName, MANIFEST_FILE,
};
pub use state::{TrainingState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use train::{evaluate_split, mine, pair_distance_values, train_seed, SeedOutcome, Trainer};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const OUTPUT_ROOT_ENV: &str = "MDR_OUTPUT_ROOT";

/// Output root from `MDR_OUTPUT_ROOT`, defaulting to `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
