use std::fs;

use mdr_core::data::{
    generate_synthetic, load_features, split_disjoint, write_features, ClassSplit, SplitSpec,
};
use mdr_core::MdrError;

#[test]
fn three_row_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feats.csv");
    fs::write(&path, "label,f1,f2\n0,1.0,2.0\n1, 3.5,-1\n0,0,0.25\n").unwrap();
    let ds = load_features(&path).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.dim(), 2);
    assert_eq!(ds.labels(), &[0, 1, 0]);
    assert_eq!(ds.features().row(1), &[3.5, -1.0]);
}

#[test]
fn wrong_arity_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ragged.csv");
    fs::write(&path, "label,f1,f2\n0,1,2\n1,3\n").unwrap();
    match load_features(&path) {
        Err(MdrError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let message = load_features(&path).unwrap_err().to_string();
    assert!(message.contains(":3"), "{message}");
}

#[test]
fn non_numeric_feature_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "label,f1\n0,1\n1,abc\n").unwrap();
    assert!(matches!(
        load_features(&path),
        Err(MdrError::Parse { line: 3, .. })
    ));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_features(&dir.path().join("nope.csv")),
        Err(MdrError::Io { .. })
    ));
}

#[test]
fn write_then_load_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synthetic.csv");
    let ds = generate_synthetic(5, 7, 3, 0.3, 1.0, 11).unwrap();
    write_features(&path, &ds).unwrap();
    let back = load_features(&path).unwrap();
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.features(), ds.features());
}

#[test]
fn loaded_files_split_like_generated_ones() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synthetic.csv");
    let ds = generate_synthetic(10, 4, 2, 0.1, 1.0, 3).unwrap();
    write_features(&path, &ds).unwrap();
    let spec = SplitSpec {
        classes: ClassSplit::Fraction(0.5),
        seed: 9,
    };
    let (a_train, a_test) = split_disjoint(&ds, &spec).unwrap();
    let (b_train, b_test) = split_disjoint(&load_features(&path).unwrap(), &spec).unwrap();
    assert_eq!(a_train.classes(), b_train.classes());
    assert_eq!(a_test.features(), b_test.features());
}

#[test]
fn nearest_centroid_separates_tight_clusters() {
    let ds = generate_synthetic(20, 50, 32, 0.05, 1.0, 5).unwrap();
    let dim = ds.dim();
    let centroids: Vec<Vec<f64>> = ds
        .classes()
        .iter()
        .map(|&c| {
            let idx = ds.indices_of(c);
            let mut mean = vec![0.0; dim];
            for &i in idx {
                for (m, x) in mean.iter_mut().zip(ds.features().row(i)) {
                    *m += x / idx.len() as f64;
                }
            }
            mean
        })
        .collect();
    let correct = (0..ds.len())
        .filter(|&i| {
            let row = ds.features().row(i);
            let best = centroids
                .iter()
                .enumerate()
                .map(|(c, m)| {
                    (
                        c,
                        row.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
                    )
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            ds.classes()[best] == ds.labels()[i]
        })
        .count();
    let accuracy = correct as f64 / ds.len() as f64;
    assert!(accuracy >= 0.99, "nearest-centroid accuracy {accuracy}");
}
