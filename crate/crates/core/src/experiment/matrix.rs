//! Multi-config comparison runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run::{config_hash, run_seeds, MeanStd, RunManifest, MANIFEST_FILE};
use super::ExperimentConfig;
use crate::error::{MdrError, Result};

/// One config's aggregate over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub name: String,
    pub config_hash: String,
    pub loss: String,
    pub mdr: bool,
    pub lambda: f64,
    pub levels: Vec<f64>,
    pub runs_ok: usize,
    pub failures: Vec<String>,
    pub test_recall_at_1: Option<MeanStd>,
    pub test_norm_cv: Option<MeanStd>,
    pub gap: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
}

fn cell(m: &Option<MeanStd>) -> (String, String) {
    match m {
        Some(m) => (format!("{:?}", m.mean), format!("{:?}", m.std)),
        None => (String::new(), String::new()),
    }
}

impl MatrixReport {
    pub const CSV_HEADER: &'static str = "name,loss,mdr,lambda,levels,runs_ok,runs_failed,\
test_recall_at_1_mean,test_recall_at_1_std,test_norm_cv_mean,test_norm_cv_std,gap_mean,gap_std";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let levels = r
                .levels
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            let (r1m, r1s) = cell(&r.test_recall_at_1);
            let (cvm, cvs) = cell(&r.test_norm_cv);
            let (gm, gs) = cell(&r.gap);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{r1m},{r1s},{cvm},{cvs},{gm},{gs}",
                r.name,
                r.loss,
                r.mdr,
                r.lambda,
                levels,
                r.runs_ok,
                r.failures.len()
            )
            .expect("string write");
        }
        out
    }

    pub fn to_summary(&self) -> String {
        let fmt = |m: &Option<MeanStd>| m.map_or_else(|| "n/a".to_string(), |m| m.to_string());
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = format!(
            "{:<width$}  {:>5}  {:>19}  {:>19}  {:>19}\n",
            "name", "runs", "test R@1", "norm CV", "train-test gap"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<width$}  {:>5}  {:>19}  {:>19}  {:>19}",
                r.name,
                format!("{}/{}", r.runs_ok, r.runs_ok + r.failures.len()),
                fmt(&r.test_recall_at_1),
                fmt(&r.test_norm_cv),
                fmt(&r.gap)
            )
            .expect("string write");
            for f in &r.failures {
                writeln!(out, "    failed: {f}").expect("string write");
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv = dir.join("report.csv");
        let txt = dir.join("summary.txt");
        std::fs::write(&csv, self.to_csv()).map_err(|e| MdrError::io(&csv, e))?;
        std::fs::write(&txt, self.to_summary()).map_err(|e| MdrError::io(&txt, e))?;
        Ok((csv, txt))
    }
}

/// Runs every config × seed, continuing past failures, and writes one
/// manifest per config plus `report.csv` and `summary.txt` in `output_root`.
pub fn run_matrix(configs: &[ExperimentConfig], output_root: &Path) -> Result<MatrixReport> {
    if configs.is_empty() {
        return Err(MdrError::config("matrix needs at least one config"));
    }
    let mut names = BTreeSet::new();
    for c in configs {
        c.validate()?;
        if !names.insert(c.run.name.as_str()) {
            return Err(MdrError::config(format!(
                "duplicate run name '{}' in matrix",
                c.run.name
            )));
        }
    }
    std::fs::create_dir_all(output_root).map_err(|e| MdrError::io(output_root, e))?;

    let rows = configs
        .par_iter()
        .map(|config| {
            let run_dir = output_root.join(&config.run.name);
            let mut failures = Vec::new();
            let mut runs = Vec::new();
            if let Err(e) = std::fs::create_dir_all(&run_dir) {
                failures.push(format!("{}: {e}", run_dir.display()));
            } else {
                for (seed, result) in run_seeds(config, &run_dir) {
                    match result {
                        Ok(run) => runs.push(run),
                        Err(e) => failures.push(format!("seed {seed}: {e}")),
                    }
                }
            }
            let manifest = RunManifest::build(config, &run_dir, runs);
            if let Err(e) = manifest.save(&run_dir.join(MANIFEST_FILE)) {
                failures.push(e.to_string());
            }
            for f in &failures {
                log::error!("{}: {f}", config.run.name);
            }
            MatrixRow {
                name: config.run.name.clone(),
                config_hash: config_hash(config),
                loss: config.loss.kind.to_string(),
                mdr: config.mdr.enabled,
                lambda: config.loss.lambda,
                levels: config.mdr.levels.clone(),
                runs_ok: manifest.runs.len(),
                failures,
                test_recall_at_1: manifest.summary.get("test_recall_at_1").copied(),
                test_norm_cv: manifest.summary.get("test_norm_cv").copied(),
                gap: manifest.summary.get("gap").copied(),
            }
        })
        .collect();
    let report = MatrixReport { rows };
    report.write(output_root)?;
    Ok(report)
}

/// Loads every `*.toml` in a directory, sorted by file name.
pub fn load_config_dir(dir: &Path) -> Result<Vec<ExperimentConfig>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| MdrError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(MdrError::config(format!(
            "no .toml configs in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| ExperimentConfig::load(p)).collect()
}
