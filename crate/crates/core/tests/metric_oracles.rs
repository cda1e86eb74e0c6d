use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusehar_core::eval::{macro_f1, top_k_accuracy};

/// Sorts class indices by descending score, ascending index on ties.
fn oracle_top_k(logits: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if order[..k].contains(&label) {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

/// Precision and recall per class, then their harmonic mean.
fn oracle_macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..classes {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        let actual = labels.iter().filter(|&&l| l == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / classes as f64
}

#[test]
fn top_k_matches_sorting_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let n = rng.gen_range(1..12);
        let c = rng.gen_range(1..8);
        // a coarse value grid forces plenty of ties
        let logits = Array2::from_shape_fn((n, c), |_| rng.gen_range(-3..=3) as f64 * 0.5);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        for k in 1..=c {
            let fast = top_k_accuracy(&logits, &labels, k).unwrap();
            let slow = oracle_top_k(&logits, &labels, k);
            assert_eq!(fast, slow, "case {case}, k = {k}");
        }
    }
}

#[test]
fn macro_f1_matches_precision_recall_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let n = rng.gen_range(1..20);
        let c = rng.gen_range(1..7);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let fast = macro_f1(&preds, &labels, c).unwrap();
        let slow = oracle_macro_f1(&preds, &labels, c);
        assert!((fast - slow).abs() < 1e-12, "case {case}: {fast} vs {slow}");
    }
}

#[test]
fn hand_derived_macro_f1() {
    assert!((macro_f1(&[0, 0, 1], &[0, 1, 1], 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn metrics_are_invariant_to_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let (n, c) = (10, 4);
        let logits = Array2::from_shape_fn((n, c), |_| rng.gen::<f64>());
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(rng.gen_range(0..n));
        let shuffled = logits.select(ndarray::Axis(0), &perm);
        let shuffled_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        for k in 1..=c {
            assert_eq!(
                top_k_accuracy(&logits, &labels, k).unwrap(),
                top_k_accuracy(&shuffled, &shuffled_labels, k).unwrap()
            );
        }
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let shuffled_preds: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        assert_eq!(
            macro_f1(&preds, &labels, c).unwrap(),
            macro_f1(&shuffled_preds, &shuffled_labels, c).unwrap()
        );
    }
}
