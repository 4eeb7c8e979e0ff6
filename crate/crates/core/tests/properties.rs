use std::collections::BTreeSet;

use proptest::prelude::*;

use mdr_core::data::{generate_synthetic, split_disjoint, ClassSplit, SplitSpec};
use mdr_core::embedder::EmbeddingBatch;
use mdr_core::losses::{self, TripletSet};
use mdr_core::mdr::{self, batch_statistics, DistanceStats, LevelSet, PairSet};
use mdr_core::numerics::{ParamStore, Tape, Tensor};
use mdr_core::sampling;

fn embeddings(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

fn distances_of(e: &Tensor, labels: &[usize]) -> Vec<f64> {
    let mut tape = Tape::new();
    let node = tape.constant(e.clone());
    let batch = EmbeddingBatch::new(&tape, node, labels.to_vec()).unwrap();
    let d = mdr::pairwise_distances(&mut tape, &batch, &PairSet::all(labels)).unwrap();
    tape.value(d).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_class_partition(seed in any::<u64>(), frac in 0.05f64..0.95, classes in 2usize..40) {
        let ds = generate_synthetic(classes, 3, 2, 0.1, 1.0, seed).unwrap();
        let (train, test) = split_disjoint(&ds, &SplitSpec { classes: ClassSplit::Fraction(frac), seed }).unwrap();
        let a: BTreeSet<usize> = train.labels().iter().copied().collect();
        let b: BTreeSet<usize> = test.labels().iter().copied().collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert!(!a.is_empty() && !b.is_empty());
        prop_assert_eq!(a.len() + b.len(), classes);
        prop_assert_eq!(train.len() + test.len(), ds.len());
    }

    #[test]
    fn pair_set_counts(labels in prop::collection::vec(0usize..5, 2..40)) {
        let pairs = PairSet::all(&labels);
        let n = labels.len();
        prop_assert_eq!(pairs.len(), n * (n - 1) / 2);
        let same: usize = (0..5)
            .map(|c| labels.iter().filter(|&&l| l == c).count())
            .map(|k| k * k.saturating_sub(1) / 2)
            .sum();
        prop_assert_eq!(pairs.num_positive(), same);
        prop_assert!(pairs.pairs.iter().all(|&(i, j)| i < j));
    }

    #[test]
    fn zero_momentum_standardizes(e in embeddings(9, 4)) {
        let d = distances_of(&e, &labels(9, 3));
        let mut stats = DistanceStats::new(0.0).unwrap();
        stats.update(&d);
        let z: Vec<f64> = d.iter().map(|&v| stats.normalize_value(v)).collect();
        let (mean, std) = batch_statistics(&z);
        prop_assert!(mean.abs() <= 1e-9, "mean {}", mean);
        prop_assert!((std - 1.0).abs() <= 1e-9, "std {}", std);
    }

    #[test]
    fn rescaling_leaves_normalized_distances(e in embeddings(8, 3), c in 0.1f64..10.0) {
        let l = labels(8, 2);
        let norm = |t: &Tensor| {
            let d = distances_of(t, &l);
            let mut s = DistanceStats::new(0.0).unwrap();
            s.update(&d);
            d.iter().map(|&v| s.normalize_value(v)).collect::<Vec<_>>()
        };
        let a = norm(&e);
        let b = norm(&e.map(|x| x * c));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
        }
    }

    #[test]
    fn triplet_loss_ignores_translation(e in embeddings(8, 3), shift in prop::collection::vec(-5.0f64..5.0, 3)) {
        let l = labels(8, 2);
        let triplets = sampling::all_valid_triplets(&l);
        let value = |t: Tensor| {
            let mut tape = Tape::new();
            let node = tape.constant(t);
            let batch = EmbeddingBatch::new(&tape, node, l.clone()).unwrap();
            let loss = losses::triplet_loss(&mut tape, &batch, &triplets, 0.2).unwrap();
            tape.value(loss).item()
        };
        let moved = Tensor::new(
            e.shape().to_vec(),
            e.data().iter().enumerate().map(|(k, x)| x + shift[k % 3]).collect(),
        ).unwrap();
        prop_assert!((value(e) - value(moved)).abs() < 1e-9);
    }

    #[test]
    fn trick_makes_dml_scale_free(e in embeddings(8, 3), c in 0.1f64..10.0) {
        let l = labels(8, 2);
        let triplets = TripletSet::new(sampling::all_valid_triplets(&l).triplets);
        let value = |t: Tensor| {
            let mut stats = DistanceStats::new(0.0).unwrap();
            stats.update(&distances_of(&t, &l));
            let mut tape = Tape::new();
            let node = tape.constant(t);
            let batch = EmbeddingBatch::new(&tape, node, l.clone()).unwrap();
            let scaled = losses::apply_trick(&mut tape, &batch, &stats).unwrap();
            let loss = losses::triplet_loss(&mut tape, &scaled, &triplets, 0.2).unwrap();
            tape.value(loss).item()
        };
        let a = value(e.clone());
        let b = value(e.map(|x| x * c));
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn combined_gradient_is_linear(e in embeddings(8, 3), lambda in 0.0f64..2.0) {
        let l = labels(8, 2);
        let mut stats = DistanceStats::new(0.0).unwrap();
        stats.update(&distances_of(&e, &l));
        let triplets = sampling::all_valid_triplets(&l);

        let mut params = ParamStore::new();
        let emb = params.add("e", e.clone(), true);
        let levels = LevelSet::new(&mut params, &[-3.0, 0.0, 3.0]).unwrap();

        // which: 0 = base loss only, 1 = regularizer only, 2 = combined
        let grads = |which: u8| {
            let mut tape = Tape::new();
            let node = tape.param(&params, emb);
            let lv = tape.param(&params, levels.param_id());
            let batch = EmbeddingBatch::new(&tape, node, l.clone()).unwrap();
            let d = mdr::pairwise_distances(&mut tape, &batch, &PairSet::all(&l)).unwrap();
            let z = mdr::normalize_distances(&mut tape, d, &stats).unwrap();
            let reg = mdr::mdr_loss(&mut tape, z, lv).unwrap().loss;
            let scaled = losses::apply_trick(&mut tape, &batch, &stats).unwrap();
            let dml = losses::triplet_loss(&mut tape, &scaled, &triplets, 0.2).unwrap();
            let root = match which {
                0 => dml,
                1 => reg,
                _ => losses::combined_loss(&mut tape, dml, reg, lambda).unwrap(),
            };
            tape.backward(root).unwrap()
        };
        let (g_dml, g_reg, g_all) = (grads(0), grads(1), grads(2));
        for id in params.ids() {
            let a = g_all.get(id).unwrap().data();
            let b = g_dml.get(id).unwrap().data();
            let c = g_reg.get(id).unwrap().data();
            for k in 0..a.len() {
                prop_assert!((a[k] - (b[k] + lambda * c[k])).abs() <= 1e-12);
            }
        }
    }
}
