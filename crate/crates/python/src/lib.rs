//! Python module `mdrlab`: plain-list access to the regularizer, metrics,
//! synthetic data and the experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mdr_core::data;
use mdr_core::embedder::EmbeddingBatch;
use mdr_core::evaluation;
use mdr_core::experiment::{self, SplitName};
use mdr_core::mdr::{self, PairSet};
use mdr_core::numerics::{Tape, Tensor};
use mdr_core::MdrError;

fn py_err(e: MdrError) -> PyErr {
    match e {
        MdrError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("expected at least one row"));
    }
    Tensor::from_rows(&rows).map_err(py_err)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.row_iter().map(<[f64]>::to_vec).collect()
}

/// Serializable value to plain Python objects via the json module.
fn to_python<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Momentum-averaged mean and standard deviation of pairwise distances.
#[pyclass(name = "DistanceStats", from_py_object)]
#[derive(Clone)]
struct PyDistanceStats(mdr::DistanceStats);

#[pymethods]
impl PyDistanceStats {
    #[new]
    #[pyo3(signature = (gamma = 0.9))]
    fn new(gamma: f64) -> PyResult<Self> {
        mdr::DistanceStats::new(gamma).map(Self).map_err(py_err)
    }

    /// Folds a batch of distances in; returns False if fewer than two were given.
    fn update(&mut self, distances: Vec<f64>) -> bool {
        self.0.update(&distances)
    }

    fn normalize(&self, distances: Vec<f64>) -> PyResult<Vec<f64>> {
        if !self.0.initialized {
            return Err(PyValueError::new_err(
                "statistics have not seen a batch yet",
            ));
        }
        Ok(distances
            .iter()
            .map(|&d| self.0.normalize_value(d))
            .collect())
    }

    #[getter]
    fn mu_star(&self) -> f64 {
        self.0.mu_star
    }

    #[getter]
    fn sigma_star(&self) -> f64 {
        self.0.sigma_star
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }

    #[getter]
    fn initialized(&self) -> bool {
        self.0.initialized
    }

    fn __repr__(&self) -> String {
        format!(
            "DistanceStats(mu_star={}, sigma_star={}, gamma={}, initialized={})",
            self.0.mu_star, self.0.sigma_star, self.0.gamma, self.0.initialized
        )
    }
}

/// Index of the level nearest to `d`; ties go to the lowest index.
#[pyfunction]
fn assign_level(d: f64, levels: Vec<f64>) -> PyResult<usize> {
    if levels.is_empty() {
        return Err(PyValueError::new_err("at least one level is required"));
    }
    Ok(mdr::assign_level(d, &levels))
}

/// Distances for every pair i < j, in row-major pair order.
#[pyfunction]
fn pairwise_distances(embeddings: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let e = matrix(embeddings)?;
    let labels = vec![0; e.rows()];
    Ok(experiment::pair_distance_values(&e, &PairSet::all(&labels)))
}

/// Regularization loss of normalized distances against `levels`.
///
/// Returns the loss, the chosen level per distance, and the gradients with
/// respect to the normalized distances and to the levels.
#[pyfunction]
fn mdr_loss(
    normalized: Vec<f64>,
    levels: Vec<f64>,
) -> PyResult<(f64, Vec<usize>, Vec<f64>, Vec<f64>)> {
    if normalized.is_empty() || levels.is_empty() {
        return Err(PyValueError::new_err(
            "need at least one distance and one level",
        ));
    }
    let mut params = mdr_core::numerics::ParamStore::new();
    let z = params.add("normalized", Tensor::vector(normalized), false);
    let s = params.add("levels", Tensor::vector(levels), false);
    let mut tape = Tape::new();
    let zn = tape.param(&params, z);
    let sn = tape.param(&params, s);
    let term = mdr::mdr_loss(&mut tape, zn, sn).map_err(py_err)?;
    let grads = tape.backward(term.loss).map_err(py_err)?;
    let grad = |id| {
        grads
            .get(id)
            .map(|g: &Tensor| g.data().to_vec())
            .unwrap_or_default()
    };
    Ok((
        tape.value(term.loss).item(),
        term.assignment,
        grad(z),
        grad(s),
    ))
}

/// Embeddings divided by the running mean distance.
#[pyfunction]
fn apply_trick(embeddings: Vec<Vec<f64>>, stats: &PyDistanceStats) -> PyResult<Vec<Vec<f64>>> {
    let e = matrix(embeddings)?;
    let labels = vec![0; e.rows()];
    let mut tape = Tape::new();
    let node = tape.constant(e);
    let batch = EmbeddingBatch::new(&tape, node, labels).map_err(py_err)?;
    let scaled = mdr_core::losses::apply_trick(&mut tape, &batch, &stats.0).map_err(py_err)?;
    Ok(rows_of(tape.value(scaled.embeddings)))
}

/// Recall@K as a dict {k: recall}. Without a gallery every item queries all
/// the others.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, ks, gallery = None, gallery_labels = None))]
fn recall_at_k(
    py: Python<'_>,
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    ks: Vec<usize>,
    gallery: Option<Vec<Vec<f64>>>,
    gallery_labels: Option<Vec<usize>>,
) -> PyResult<Py<PyAny>> {
    let q = matrix(embeddings)?;
    let result = match (gallery, gallery_labels) {
        (Some(g), Some(gl)) => evaluation::recall_at_k(&q, &labels, &matrix(g)?, &gl, &ks),
        (None, None) => evaluation::recall_at_k_within(&q, &labels, &ks),
        _ => {
            return Err(PyValueError::new_err(
                "gallery and gallery_labels go together",
            ))
        }
    }
    .map_err(py_err)?;
    let map: std::collections::BTreeMap<usize, f64> =
        result.iter().map(|r| (r.k, r.recall)).collect();
    let dict = pyo3::types::PyDict::new(py);
    for (k, v) in map {
        dict.set_item(k, v)?;
    }
    Ok(dict.into_any().unbind())
}

/// (mean, std, coefficient of variation) of the row two-norms.
#[pyfunction]
fn norm_statistics(embeddings: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    let s = evaluation::norm_statistics(&matrix(embeddings)?);
    Ok((s.mean, s.std, s.cv))
}

/// Gaussian clusters; returns (features, labels).
#[pyfunction]
#[pyo3(signature = (classes, per_class, dim, cluster_std, separation = 1.0, seed = 0))]
fn generate_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    cluster_std: f64,
    separation: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = data::generate_synthetic(classes, per_class, dim, cluster_std, separation, seed)
        .map_err(py_err)?;
    Ok((rows_of(ds.features()), ds.labels().to_vec()))
}

/// Class-disjoint split; returns the train and test class lists.
#[pyfunction]
#[pyo3(signature = (labels, train_fraction = 0.5, seed = 0))]
fn split_classes(
    labels: Vec<usize>,
    train_fraction: f64,
    seed: u64,
) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let features = Tensor::zeros(&[labels.len(), 1]);
    let ds = data::FeatureDataset::new(features, labels).map_err(py_err)?;
    let spec = data::SplitSpec {
        classes: data::ClassSplit::Fraction(train_fraction),
        seed,
    };
    let (train, test) = data::split_disjoint(&ds, &spec).map_err(py_err)?;
    Ok((train.classes().to_vec(), test.classes().to_vec()))
}

/// A full experiment description.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig(experiment::ExperimentConfig);

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overridden by TOML text.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        match toml {
            Some(text) => experiment::ExperimentConfig::from_toml_str(text)
                .map(Self)
                .map_err(py_err),
            None => Ok(Self(experiment::ExperimentConfig::default())),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        experiment::ExperimentConfig::load(&path)
            .map(Self)
            .map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml_string()
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.run.name.clone()
    }

    #[setter]
    fn set_name(&mut self, name: String) {
        self.0.run.name = name;
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.0.run.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.0.run.seeds = seeds;
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.0.optimizer.steps
    }

    #[setter]
    fn set_steps(&mut self, steps: u64) {
        self.0.optimizer.steps = steps;
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(name={:?}, seeds={:?})",
            self.0.run.name, self.0.run.seeds
        )
    }
}

/// Trains every seed under `output_root` and returns the run manifest as a dict.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig, output_root: PathBuf) -> PyResult<Py<PyAny>> {
    let manifest = py
        .detach(|| experiment::train(&config.0, &output_root))
        .map_err(py_err)?;
    to_python(py, &manifest)
}

/// A saved training state.
#[pyclass(name = "Checkpoint", from_py_object)]
#[derive(Clone)]
struct PyCheckpoint(experiment::TrainingState);

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        experiment::TrainingState::load(&path)
            .map(Self)
            .map_err(py_err)
    }

    /// Evaluation battery on "train" or "test" as a dict.
    #[pyo3(signature = (split, ks = None))]
    fn evaluate(&self, py: Python<'_>, split: &str, ks: Option<Vec<usize>>) -> PyResult<Py<PyAny>> {
        let split: SplitName = split.parse().map_err(py_err)?;
        let report = py
            .detach(|| experiment::evaluate(&self.0, split, ks.as_deref()))
            .map_err(py_err)?;
        to_python(py, &report)
    }

    /// Levels, running statistics and embedding norms as a dict.
    fn inspect(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_python(py, &experiment::inspect(&self.0).map_err(py_err)?)
    }

    /// Embeddings of raw feature rows.
    fn embed(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let e = self
            .0
            .embedder
            .embed_values(&self.0.params, &matrix(features)?)
            .map_err(py_err)?;
        Ok(rows_of(&e))
    }

    #[getter]
    fn levels(&self) -> Vec<f64> {
        self.0.level_values().to_vec()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.0.step
    }

    #[getter]
    fn stats(&self) -> PyDistanceStats {
        PyDistanceStats(self.0.stats.clone())
    }
}

#[pymodule]
fn mdrlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDistanceStats>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(assign_level, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_distances, m)?)?;
    m.add_function(wrap_pyfunction!(mdr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(apply_trick, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(norm_statistics, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(split_classes, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
