use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{evaluate_split, train_seed, SeedOutcome, TEST_TAG, TRAIN_TAG};
use super::{ExperimentConfig, TrainingState, CHECKPOINT_FILE, METRICS_FILE};
use crate::error::{MdrError, Result};
use crate::evaluation::{MetricsRecord, NormStats, SplitMetrics};

pub const MANIFEST_FORMAT: &str = "mdr-run-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Version string recorded in manifests.
pub fn tool_version() -> String {
    option_env!("MDR_GIT_DESCRIBE")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// SHA-256 of the fully resolved config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    Sha256::digest(config.to_toml_string().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Headline numbers of the last evaluation of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub step: u64,
    pub train_recall_at_1: f64,
    pub test_recall_at_1: f64,
    pub gap: f64,
    pub train_norm_cv: f64,
    pub test_norm_cv: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_recall_l2_at_1: Option<f64>,
    pub levels: Vec<f64>,
    pub mu_star: f64,
    pub sigma_star: f64,
}

impl FinalMetrics {
    pub fn from_record(r: &MetricsRecord) -> Self {
        let r1 = |m: &SplitMetrics| m.recall_at(1).unwrap_or(f64::NAN);
        Self {
            step: r.step,
            train_recall_at_1: r1(&r.train),
            test_recall_at_1: r1(&r.test),
            gap: r.gap,
            train_norm_cv: r.train.norms.cv,
            test_norm_cv: r.test.norms.cv,
            test_recall_l2_at_1: r
                .test
                .recall_l2
                .as_ref()
                .and_then(|v| v.iter().find(|x| x.k == 1))
                .map(|x| x.recall),
            levels: r.levels.clone(),
            mu_star: r.mu_star,
            sigma_star: r.sigma_star,
        }
    }

    fn named(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("train_recall_at_1", self.train_recall_at_1),
            ("test_recall_at_1", self.test_recall_at_1),
            ("gap", self.gap),
            ("train_norm_cv", self.train_norm_cv),
            ("test_norm_cv", self.test_norm_cv),
        ];
        if let Some(l2) = self.test_recall_l2_at_1 {
            v.push(("test_recall_l2_at_1", l2));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Relative to the run directory.
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub final_metrics: FinalMetrics,
}

/// Record of a multi-seed run, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub output_dir: PathBuf,
    pub runs: Vec<SeedRun>,
    /// Mean and standard deviation over seeds of each final metric.
    pub summary: BTreeMap<String, MeanStd>,
}

impl RunManifest {
    pub fn build(config: &ExperimentConfig, output_dir: &Path, runs: Vec<SeedRun>) -> Self {
        let mut by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for run in &runs {
            for (name, v) in run.final_metrics.named() {
                by_name.entry(name.to_string()).or_default().push(v);
            }
        }
        let summary = by_name
            .into_iter()
            .filter_map(|(k, v)| MeanStd::of(&v).map(|m| (k, m)))
            .collect();
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            tool_version: tool_version(),
            config_hash: config_hash(config),
            config: config.clone(),
            output_dir: output_dir.to_path_buf(),
            runs,
            summary,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| MdrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MdrError::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(MdrError::config(format!(
                "{} is not a run manifest",
                path.display()
            )));
        }
        manifest.config.validate()?;
        Ok(manifest)
    }
}

/// Runs every seed of `config` (in parallel), one result per seed.
pub fn run_seeds(config: &ExperimentConfig, run_dir: &Path) -> Vec<(u64, Result<SeedRun>)> {
    config
        .run
        .seeds
        .par_iter()
        .map(|&seed| {
            let rel = PathBuf::from(format!("seed-{seed}"));
            let result = train_seed(config, seed, &run_dir.join(&rel)).and_then(
                |SeedOutcome { records, .. }| {
                    let last = records
                        .last()
                        .ok_or_else(|| MdrError::Usage("run produced no metrics".into()))?;
                    Ok(SeedRun {
                        seed,
                        metrics: rel.join(METRICS_FILE),
                        checkpoint: rel.join(CHECKPOINT_FILE),
                        final_metrics: FinalMetrics::from_record(last),
                    })
                },
            );
            (seed, result)
        })
        .collect()
}

/// Trains all seeds of a config under `output_root/<run.name>` and writes
/// the manifest. Fails on the first seed that fails.
pub fn train(config: &ExperimentConfig, output_root: &Path) -> Result<RunManifest> {
    config.validate()?;
    let run_dir = output_root.join(&config.run.name);
    std::fs::create_dir_all(&run_dir).map_err(|e| MdrError::io(&run_dir, e))?;
    std::fs::write(run_dir.join("config.toml"), config.to_toml_string())
        .map_err(|e| MdrError::io(&run_dir, e))?;
    let mut runs = Vec::new();
    for (_, result) in run_seeds(config, &run_dir) {
        runs.push(result?);
    }
    let manifest = RunManifest::build(config, &run_dir, runs);
    manifest.save(&run_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = MdrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "test" => Ok(SplitName::Test),
            other => Err(MdrError::Usage(format!(
                "unknown split '{other}', expected train or test"
            ))),
        }
    }
}

/// Metrics of a checkpoint on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub step: u64,
    pub split: SplitName,
    pub levels: Vec<f64>,
    pub mu_star: f64,
    pub sigma_star: f64,
    pub metrics: SplitMetrics,
}

/// Re-runs the evaluation battery for a saved state on one of its splits.
///
/// `ks` overrides the configured recall cut-offs when given.
pub fn evaluate(
    state: &TrainingState,
    split: SplitName,
    ks: Option<&[usize]>,
) -> Result<EvaluationReport> {
    let (train, test) = state.config.load_splits()?;
    let data = match split {
        SplitName::Train => train,
        SplitName::Test => test,
    };
    if data.dim() != state.embedder.input_dim() {
        return Err(MdrError::config(format!(
            "checkpoint expects {} input features but the dataset has {}",
            state.embedder.input_dim(),
            data.dim()
        )));
    }
    let mut state = state.clone();
    if let Some(ks) = ks {
        state.config.evaluation.ks = ks.to_vec();
        state.config.validate()?;
    }
    let tag = match split {
        SplitName::Train => TRAIN_TAG,
        SplitName::Test => TEST_TAG,
    };
    Ok(EvaluationReport {
        seed: state.seed,
        step: state.step,
        split,
        levels: state.level_values().to_vec(),
        mu_star: state.stats.mu_star,
        sigma_star: state.stats.sigma_star,
        metrics: evaluate_split(&state, &data, tag)?,
    })
}

/// Summary printed by `inspect`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub seed: u64,
    pub step: u64,
    pub levels: Vec<f64>,
    pub mu_star: f64,
    pub sigma_star: f64,
    pub gamma: f64,
    pub parameters: Vec<(String, Vec<usize>)>,
    pub train_norms: NormStats,
    pub test_norms: NormStats,
}

pub fn inspect(state: &TrainingState) -> Result<Inspection> {
    let (train, test) = state.config.load_splits()?;
    let norms = |d: &crate::data::FeatureDataset| -> Result<NormStats> {
        Ok(crate::evaluation::norm_statistics(
            &state.embedder.embed_values(&state.params, d.features())?,
        ))
    };
    Ok(Inspection {
        seed: state.seed,
        step: state.step,
        levels: state.level_values().to_vec(),
        mu_star: state.stats.mu_star,
        sigma_star: state.stats.sigma_star,
        gamma: state.stats.gamma,
        parameters: state
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
            .collect(),
        train_norms: norms(&train)?,
        test_norms: norms(&test)?,
    })
}

/// Reads every metrics record from a line-delimited file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| MdrError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MdrError::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
