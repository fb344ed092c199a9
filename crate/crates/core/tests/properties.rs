//! Randomized invariants of streams, buffers, losses and metrics.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ider::buffer::{BufferPolicy, Offer, ReplayBuffer};
use ider::data::{LabeledDataset, Split};
use ider::losses::{cross_entropy, l_ice_with_inputs, l_ide, Distance, LossConfig};
use ider::metrics::{ece, faa, final_forgetting, AccuracyMatrix, ConfidenceRecord};
use ider::nn::{empty_batch, snapshot};
use ider::streams::{make_cil_stream, make_gcil_stream, GcilMode};
use ider::tensor::{softmax_rows, Tensor};

fn blobs(classes: usize, per: usize) -> LabeledDataset {
    LabeledDataset::gaussian_blobs(classes, per, [1, 2, 2], 0.3, 0, Split::Train).unwrap()
}

fn policy() -> impl Strategy<Value = BufferPolicy> {
    prop_oneof![
        Just(BufferPolicy::Reservoir),
        Just(BufferPolicy::ClassBalanced)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cil_streams_partition_the_train_set(per_task in 1usize..4, n_tasks in 1usize..6, seed in any::<u64>()) {
        let ds = blobs(per_task * n_tasks, 3);
        let s = make_cil_stream(&ds, n_tasks, seed).unwrap();
        let mut seen_classes = BTreeSet::new();
        let mut samples = Vec::new();
        for t in s.tasks() {
            prop_assert_eq!(t.classes.len(), per_task);
            for &c in &t.classes {
                prop_assert!(seen_classes.insert(c), "class {} in two tasks", c);
            }
            prop_assert_eq!(t.per_class_counts.values().sum::<usize>(), t.train_samples.len());
            samples.extend(t.train_samples.iter().copied());
        }
        samples.sort_unstable();
        prop_assert_eq!(samples, (0..ds.len()).collect::<Vec<_>>());
        prop_assert_eq!(&s, &make_cil_stream(&ds, n_tasks, seed).unwrap());
    }

    #[test]
    fn gcil_streams_respect_their_parameters(
        lo in 1usize..6,
        extra in 0usize..5,
        n_tasks in 1usize..8,
        budget_extra in 0usize..60,
        longtail in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let hi = (lo + extra).min(10);
        let ds = blobs(10, 8);
        let mode = if longtail { GcilMode::Longtail } else { GcilMode::Uniform };
        let budget = hi + budget_extra;
        let s = make_gcil_stream(&ds, n_tasks, mode, (lo, hi), budget, seed).unwrap();
        prop_assert_eq!(&s, &make_gcil_stream(&ds, n_tasks, mode, (lo, hi), budget, seed).unwrap());
        for t in s.tasks() {
            prop_assert!(t.classes.len() >= lo && t.classes.len() <= hi);
            prop_assert_eq!(t.train_samples.len(), budget);
            prop_assert_eq!(t.per_class_counts.values().sum::<usize>(), budget);
            for &i in &t.train_samples {
                prop_assert!(t.contains(ds.label(i)));
            }
            let mut counts: Vec<usize> = t.per_class_counts.values().copied().collect();
            counts.sort_unstable();
            match mode {
                GcilMode::Uniform => prop_assert!(counts[counts.len() - 1] - counts[0] <= 1),
                GcilMode::Longtail => {
                    if counts.len() > 1 && budget > counts.len() {
                        prop_assert!(counts[counts.len() - 1] > counts[0], "{:?}", counts);
                    }
                }
            }
        }
    }

    #[test]
    fn buffer_invariants_hold_under_any_stream(
        capacity in 1usize..30,
        classes in prop::collection::vec(0usize..5, 0..300),
        policy in policy(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ReplayBuffer::new(capacity, policy).unwrap();
        for (i, &c) in classes.iter().enumerate() {
            let before = b.per_class_counts().clone();
            let outcome = b.offer(i, c, &mut rng);
            prop_assert!(b.len() <= capacity);
            prop_assert_eq!(b.stream_count(), i as u64 + 1);
            if i < capacity {
                prop_assert_eq!(outcome, Offer::Stored);
                prop_assert_eq!(b.entries()[i], (i, c));
            }
            if let (Offer::Replaced { .. }, BufferPolicy::ClassBalanced) = (outcome, policy) {
                // The evicted class is the one whose count went down (or the
                // offered class itself when it was the one evicted).
                let top = before.values().copied().max().unwrap();
                let lost: Vec<usize> = before
                    .iter()
                    .filter(|(k, &n)| b.per_class_counts().get(k).copied().unwrap_or(0) < n)
                    .map(|(&k, _)| k)
                    .collect();
                match lost.as_slice() {
                    [] => prop_assert_eq!(before.get(&c).copied(), Some(top)),
                    [k] => prop_assert_eq!(before[k], top),
                    _ => prop_assert!(false, "several classes shrank"),
                }
            }
        }
        prop_assert_eq!(b.len(), classes.len().min(capacity));
        let mut recount = BTreeMap::new();
        for e in b.entries() {
            *recount.entry(e.1).or_insert(0usize) += 1;
        }
        prop_assert_eq!(&recount, b.per_class_counts());
    }

    #[test]
    fn class_balanced_stays_balanced_on_interleaved_streams(
        k in 2usize..6,
        capacity in 2usize..40,
        seed in any::<u64>(),
    ) {
        let capacity = capacity.max(k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ReplayBuffer::new(capacity, BufferPolicy::ClassBalanced).unwrap();
        for i in 0..capacity * k * 3 {
            b.offer(i, i % k, &mut rng);
            if i + 1 >= capacity * k {
                let counts: Vec<usize> = (0..k).map(|c| b.per_class_counts().get(&c).copied().unwrap_or(0)).collect();
                let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
                prop_assert!(spread <= 2, "{:?}", counts);
            }
        }
    }

    #[test]
    fn ece_ignores_sample_order(
        records in prop::collection::vec((0.0f64..=1.0, 0usize..3, 0usize..3), 1..100),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let log: Vec<ConfidenceRecord> = records
            .iter()
            .map(|&(confidence, predicted, label)| ConfidenceRecord { confidence, predicted, label, task: 0 })
            .collect();
        let mut shuffled = log.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = ece(&log, 10).unwrap();
        let b = ece(&shuffled, 10).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn metrics_stay_in_range(rows in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 6), 2..6)) {
        let t = rows.len();
        let mut m = AccuracyMatrix::new(t);
        for (i, row) in rows.iter().enumerate() {
            for (s, &v) in row.iter().enumerate().take(t).skip(i) {
                m.set(i, s, v).unwrap();
            }
        }
        let f = faa(&m).unwrap();
        let ff = final_forgetting(&m).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        // Later gains make forgetting negative.
        prop_assert!((-1.0..=1.0).contains(&ff));
    }

    #[test]
    fn appending_a_step_without_drops_keeps_total_forgetting(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 5), 2..5),
        fresh in 0.0f64..=1.0,
    ) {
        let t = rows.len();
        let mut a = AccuracyMatrix::new(t);
        let mut b = AccuracyMatrix::new(t + 1);
        // Accuracy of each task only falls over time.
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|mut r| {
                r.sort_by(|x, y| y.total_cmp(x));
                r
            })
            .collect();
        for (i, row) in rows.iter().enumerate() {
            for (s, &v) in row.iter().enumerate().take(t).skip(i) {
                a.set(i, s, v).unwrap();
                b.set(i, s, v).unwrap();
            }
            // every earlier task keeps its final accuracy at the new step
            b.set(i, t, row[t - 1]).unwrap();
        }
        b.set(t, t, fresh).unwrap();
        let total_a = final_forgetting(&a).unwrap() * (t - 1) as f64;
        let total_b = final_forgetting(&b).unwrap() * t as f64;
        prop_assert!((total_a - total_b).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_finite_and_nonnegative(
        logits in prop::collection::vec(-50.0f64..50.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let z = Tensor::from_vec(&[3, 4], logits).unwrap();
        let (v, g) = cross_entropy(&z, &labels).unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
        for i in 0..3 {
            prop_assert!(g.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn mse_distance_depends_only_on_the_difference(shift in -5.0f64..5.0, seed in 0u64..50) {
        // Shifting live logits and target by the same amount leaves the value unchanged.
        let net = common::tiny_mlp(seed);
        let x = common::random_batch(&net, 4, seed + 1).x;
        let ck = snapshot(&net, 0);
        let y0 = common::empty_logits(&net, &x);
        let y1 = ck.forward(&x, &softmax_rows(&y0)).unwrap();
        let d = common::mse_oracle(&y0, &y1);
        let shifted = |t: &Tensor| Tensor::from_vec(t.shape(), t.data().iter().map(|v| v + shift).collect()).unwrap();
        prop_assert!((d - common::mse_oracle(&shifted(&y0), &shifted(&y1))).abs() < 1e-9);
        let v = l_ide(&net, Some(&ck), &x, &LossConfig::default(), None, 1.0).unwrap().unwrap();
        prop_assert!((v - d).abs() < 1e-12);
        prop_assert!(v >= 0.0);
        let kl = LossConfig { distance: Distance::Kl, ..Default::default() };
        let v = l_ide(&net, Some(&ck), &x, &kl, None, 1.0).unwrap().unwrap();
        prop_assert!(v.is_finite() && v >= -1e-12);
    }
}

/// With the inner prediction stopped, the gradient of the two-pass loss does
/// not depend on how the inner prediction's graph is parameterized: replacing
/// the network used for the inner pass by a perturbed copy changes only the
/// value fed to the second pass, and the stopped gradient equals the gradient
/// of the oracle with that value held fixed.
#[test]
fn stopped_inner_prediction_contributes_no_gradient() {
    let net = common::tiny_conv(21);
    let b = common::random_batch(&net, 4, 22);
    let ystar = empty_batch(4, 3).unwrap();
    let mut g = vec![0.0; net.n_params()];
    l_ice_with_inputs(&net, &b, &ystar, true, Some(&mut g), 1.0).unwrap();
    let inner = softmax_rows(&net.forward(&b.x, &ystar).unwrap());
    let num = common::numeric_gradient(net.params(), 1e-5, |p| {
        common::ice_oracle(&common::with_params(&net, p), &b, &ystar, Some(&inner))
    });
    assert!(common::max_relative_error(&g, &num, 1e-6) < 1e-4);
    let mut through = vec![0.0; net.n_params()];
    l_ice_with_inputs(&net, &b, &ystar, false, Some(&mut through), 1.0).unwrap();
    let diff = g
        .iter()
        .zip(&through)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(
        diff > 1e-8,
        "the inner path carries gradient when not stopped"
    );
}

#[test]
fn sample_batch_is_uniform_over_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut b = ReplayBuffer::new(10, BufferPolicy::Reservoir).unwrap();
    for i in 0..10usize {
        b.offer(i, 0, &mut rng);
    }
    let snapshot_entries = b.entries().to_vec();
    let mut counts = [0usize; 10];
    for (i, _) in b.sample_batch(10_000, &mut rng) {
        counts[i] += 1;
    }
    assert_eq!(b.entries(), snapshot_entries.as_slice());
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.1).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn gcil_classes_reappear_across_tasks() {
    let ds = blobs(100, 30);
    for seed in 0..5 {
        let s = make_gcil_stream(&ds, 20, GcilMode::Uniform, (5, 25), 100, seed).unwrap();
        let mut seen = BTreeSet::new();
        let repeated = s
            .tasks()
            .iter()
            .flat_map(|t| t.classes.iter())
            .any(|&c| !seen.insert(c));
        assert!(repeated, "seed {seed}");
        assert!(s.class_to_task().is_err());
    }
}

#[test]
fn longtail_tasks_are_imbalanced() {
    let ds = blobs(20, 40);
    let s = make_gcil_stream(&ds, 10, GcilMode::Longtail, (2, 10), 200, 4).unwrap();
    for t in s.tasks() {
        let mut counts: Vec<usize> = t.per_class_counts.values().copied().collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        if counts.len() > 1 {
            assert!(counts[0] > counts[counts.len() - 1], "{counts:?}");
        }
    }
}
