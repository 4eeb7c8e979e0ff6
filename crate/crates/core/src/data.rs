//! Feature datasets, synthetic generation and class-disjoint splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MdrError, Result};
use crate::numerics::Tensor;

/// `N×F` features with one integer class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: Vec<usize>,
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl FeatureDataset {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(MdrError::Shape {
                op: "dataset",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if !features.is_finite() {
            return Err(MdrError::NonFinite("dataset features".into()));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        Ok(Self {
            classes: by_class.keys().copied().collect(),
            features,
            labels,
            by_class,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Distinct labels, ascending.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn indices_of(&self, class: usize) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows whose label is in `classes`, in original order.
    pub fn subset(&self, classes: &BTreeSet<usize>) -> Result<Self> {
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.features.select_rows(&rows), labels)
    }
}

/// Gaussian clusters around random centers.
///
/// Centers are drawn uniformly from the unit ball and then rescaled so the
/// closest two centers are `separation` apart. Each instance is its class
/// center plus isotropic noise with standard deviation `cluster_std`.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    cluster_std: f64,
    separation: f64,
    seed: u64,
) -> Result<FeatureDataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(MdrError::config(
            "synthetic dataset needs positive class count, size and width",
        ));
    }
    if !(cluster_std >= 0.0) || !(separation > 0.0) {
        return Err(MdrError::config(format!(
            "cluster_std must be >= 0 and separation > 0, got {cluster_std} and {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            let radius = rng.random::<f64>().powf(1.0 / dim as f64);
            dir.into_iter().map(|x| x / norm * radius).collect()
        })
        .collect();
    let mut closest = f64::INFINITY;
    for i in 0..classes {
        for j in i + 1..classes {
            let d = centers[i]
                .iter()
                .zip(&centers[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            closest = closest.min(d);
        }
    }
    if closest.is_finite() && closest > 0.0 {
        let factor = separation / closest;
        for c in &mut centers {
            c.iter_mut().for_each(|x| *x *= factor);
        }
    }

    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|&c| {
                let noise: f64 = rng.sample(StandardNormal);
                c + cluster_std * noise
            }));
            labels.push(class);
        }
    }
    FeatureDataset::new(Tensor::new(vec![classes * per_class, dim], data)?, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSplit {
    /// Fraction of classes (after a seeded shuffle) used for training.
    Fraction(f64),
    Explicit {
        train: Vec<usize>,
        test: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub classes: ClassSplit,
    pub seed: u64,
}

/// Partitions the dataset by class; no label appears on both sides.
pub fn split_disjoint(
    dataset: &FeatureDataset,
    spec: &SplitSpec,
) -> Result<(FeatureDataset, FeatureDataset)> {
    let classes = dataset.classes();
    if classes.len() < 2 {
        return Err(MdrError::config(format!(
            "a class-disjoint split needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let (train, test): (BTreeSet<usize>, BTreeSet<usize>) = match &spec.classes {
        ClassSplit::Fraction(f) => {
            if !(*f > 0.0 && *f < 1.0) {
                return Err(MdrError::config(format!(
                    "train fraction must lie in (0, 1), got {f}"
                )));
            }
            let mut order = classes.to_vec();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            let n_train = ((classes.len() as f64 * f).round() as usize).clamp(1, classes.len() - 1);
            (
                order[..n_train].iter().copied().collect(),
                order[n_train..].iter().copied().collect(),
            )
        }
        ClassSplit::Explicit { train, test } => {
            let train: BTreeSet<usize> = train.iter().copied().collect();
            let test: BTreeSet<usize> = test.iter().copied().collect();
            if let Some(shared) = train.intersection(&test).next() {
                return Err(MdrError::config(format!(
                    "class {shared} listed in both train and test"
                )));
            }
            if let Some(missing) = train
                .iter()
                .chain(&test)
                .find(|c| dataset.indices_of(**c).is_empty())
            {
                return Err(MdrError::config(format!(
                    "class {missing} does not occur in the dataset"
                )));
            }
            if train.is_empty() || test.is_empty() {
                return Err(MdrError::config(
                    "explicit split needs classes on both sides",
                ));
            }
            (train, test)
        }
    };
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}

/// Reads `label,f1,…,fF` rows with a header line.
pub fn load_features(path: &Path) -> Result<FeatureDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| MdrError::io(path, std::io::Error::other(e)))?;
    let parse_err = |line: u64, message: String| MdrError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header_width = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .len();
    if header_width < 2 {
        return Err(parse_err(
            1,
            "header needs a label column and at least one feature".into(),
        ));
    }

    let mut labels = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header_width {
            return Err(parse_err(
                line,
                format!("expected {header_width} fields, found {}", record.len()),
            ));
        }
        let label = record[0].parse::<usize>().map_err(|_| {
            parse_err(
                line,
                format!("label '{}' is not a non-negative integer", &record[0]),
            )
        })?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v = field
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("feature '{field}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("feature '{field}' is not finite")));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    FeatureDataset::new(
        Tensor::new(vec![labels.len(), header_width - 1], data)?,
        labels,
    )
}

/// Writes the format read by [`load_features`]; floats round-trip exactly.
pub fn write_features(path: &Path, dataset: &FeatureDataset) -> Result<()> {
    let io = |e: csv::Error| MdrError::io(path, std::io::Error::other(e));
    let mut writer = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["label".to_string()];
    header.extend((1..=dataset.dim()).map(|i| format!("f{i}")));
    writer.write_record(&header).map_err(io)?;
    for (row, label) in dataset.features().row_iter().zip(dataset.labels()) {
        let mut record = vec![label.to_string()];
        record.extend(row.iter().map(|v| format!("{v:?}")));
        writer.write_record(&record).map_err(io)?;
    }
    writer.flush().map_err(|e| MdrError::io(path, e))
}
