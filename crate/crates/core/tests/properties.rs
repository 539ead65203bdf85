mod common;

use std::collections::HashSet;

use accuracy_monitor::baselines::{
    calibrate_threshold, estimate_entropy, estimate_mp, estimate_mp_star, estimate_rs, estimate_ts,
    fit_temperature, temperature_nll, ThresholdKind, TEMPERATURE_MAX, TEMPERATURE_MIN,
};
use accuracy_monitor::datamodel::{read_csv, read_jsonl, write_csv, write_jsonl};
use accuracy_monitor::metrics::{aupr, pr_curve, PositiveClass};
use accuracy_monitor::monitor::top_k_by_entropy;
use accuracy_monitor::net::DropoutMask;
use accuracy_monitor::*;
use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn shuffled(ds: &Dataset, seed: u64) -> Dataset {
    let mut records = ds.records().to_vec();
    records.shuffle(&mut rng(seed));
    Dataset::new(records).unwrap()
}

fn doubled(ds: &Dataset) -> Dataset {
    let mut records = ds.records().to_vec();
    for r in ds.records() {
        let copy = SoftmaxRecord::new(format!("{}-dup", r.id()), r.probs().to_vec(), r.label()).unwrap();
        records.push(copy);
    }
    Dataset::new(records).unwrap()
}

fn random_ensemble(input_dim: usize, members: usize, seed: u64) -> Ensemble {
    let nets = (0..members)
        .map(|b| random_net(input_dim, &[5, 3], seed.wrapping_mul(100).wrapping_add(b as u64)))
        .collect();
    Ensemble::from_members(nets, seed).unwrap()
}

// ---- datamodel ----

proptest! {
    #[test]
    fn predicted_is_lowest_maximal_index(levels in prop::collection::vec(1u32..5, 2..8)) {
        // Few distinct levels make exact ties common.
        let total: u32 = levels.iter().sum();
        let probs: Vec<f64> = levels.iter().map(|&v| v as f64 / total as f64).collect();
        let r = SoftmaxRecord::new("r", probs, None).unwrap();
        let p = r.probs();
        let k = r.predicted();
        prop_assert!(p.iter().all(|&v| p[k] >= v));
        prop_assert!(p[..k].iter().all(|&v| v < p[k]));
    }

    #[test]
    fn null_labels_are_never_correct(seed in any::<u64>(), classes in 2usize..12) {
        let mut r = rng(seed);
        let rec = SoftmaxRecord::new("n", random_probs(&mut r, classes, 6.0), Some(Label::Null)).unwrap();
        prop_assert_eq!(rec.is_correct(), Some(false));
    }

    #[test]
    fn jsonl_and_csv_round_trip(seed in any::<u64>(), n in 1usize..40, classes in 2usize..7) {
        let mut ds = random_dataset(n, classes, seed, 0.7);
        // Sprinkle NULL labels.
        let records = ds.records().iter().enumerate().map(|(i, r)| {
            if i % 5 == 3 { r.clone().with_label(Some(Label::Null)).unwrap() } else { r.clone() }
        }).collect();
        ds = Dataset::new(records).unwrap();

        let mut buf = Vec::new();
        write_jsonl(&ds, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice(), "mem").unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back_csv = read_csv(buf.as_slice(), "mem").unwrap();
        for loaded in [back, back_csv] {
            prop_assert_eq!(loaded.len(), ds.len());
            for (a, b) in ds.records().iter().zip(loaded.records()) {
                prop_assert_eq!(a.id(), b.id());
                prop_assert_eq!(a.label(), b.label());
                for (x, y) in a.probs().iter().zip(b.probs()) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300), "{} vs {}", x, y);
                }
            }
        }
    }

    #[test]
    fn true_accuracy_ignores_order(seed in any::<u64>(), n in 1usize..60) {
        let ds = random_dataset(n, 4, seed, 1.0);
        prop_assert_eq!(true_accuracy(&ds).unwrap(), true_accuracy(&shuffled(&ds, seed ^ 7)).unwrap());
    }
}

// ---- net ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn analytic_gradient_matches_central_differences(
        seed in any::<u64>(),
        input_dim in 2usize..6,
        hidden in prop::collection::vec(1usize..6, 1..4),
        target: bool,
        use_mask: bool,
    ) {
        let net = random_net(input_dim, &hidden, seed);
        let mut r = rng(seed ^ 0x5eed);
        let input = random_probs(&mut r, input_dim, 3.0);
        let mask: Option<Vec<f64>> = use_mask.then(|| {
            (0..hidden[0]).map(|_| if r.gen::<bool>() { 0.0 } else { 2.0 }).collect()
        });
        let worst = gradient_check(&net, &input, target, mask.as_deref());
        prop_assume!(worst.is_some());
        prop_assert!(worst.unwrap() < 1e-4, "relative error {:?}", worst);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn training_leaves_frozen_layers_untouched(seed in any::<u64>(), tail in 1usize..3) {
        let mut net = MonitorNet::new(NetArchitecture::new(4, vec![6, 5]), seed).unwrap();
        net.freeze_prefix(tail).unwrap();
        let before = net.clone();
        let ds = random_dataset(40, 4, seed, 1.0);
        let xs: Vec<&[f64]> = ds.records().iter().map(|r| r.probs()).collect();
        let ys: Vec<bool> = ds.records().iter().map(|r| r.is_correct().unwrap()).collect();
        let config = TrainConfig { epochs: 3, batch_size: 8, seed, ..TrainConfig::default() };
        net.train(&xs, &ys, &config).unwrap();
        let layers = net.layers().len();
        for l in 0..layers {
            let (a, b) = (&before.layers()[l], &net.layers()[l]);
            let same = a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits())
                && a.bias.iter().zip(&b.bias).all(|(x, y)| x.to_bits() == y.to_bits());
            if l < layers - tail {
                prop_assert!(same, "frozen layer {} changed", l);
            } else {
                prop_assert!(!same, "trainable layer {} did not move", l);
            }
        }
    }
}

#[test]
fn dropout_masks_preserve_expected_activation() {
    const PASSES: usize = 10_000;
    let net = random_net(5, &[8, 4], 11);
    let input = random_probs(&mut rng(3), 5, 3.0);
    let (_, pre) = oracle_forward(&net, &input, None);
    let activations: Vec<f64> = pre[..8].iter().map(|z| z.max(0.0)).collect();
    let q = net.architecture().dropout_rate;
    let mut sums = vec![0.0; 8];
    let mut r = rng(99);
    for _ in 0..PASSES {
        let DropoutMask(m) = net.sample_mask(&mut r);
        for (s, (a, m)) in sums.iter_mut().zip(activations.iter().zip(&m)) {
            *s += a * m;
        }
    }
    for (k, a) in activations.iter().enumerate() {
        let mean = sums[k] / PASSES as f64;
        // Each masked activation is a/(1-q) with probability 1-q, else 0.
        let se = a * (q / (1.0 - q)).sqrt() / (PASSES as f64).sqrt();
        assert!((mean - a).abs() <= 3.0 * se + 1e-15, "unit {k}: {mean} vs {a} (se {se})");
    }
}

#[test]
fn training_is_independent_of_worker_count() {
    let reference = synth::generate(&ScenarioSpec::new(300, 5, 0.7, 4)).unwrap();
    let arch = NetArchitecture::new(5, vec![12, 6]);
    let config = TrainConfig { epochs: 4, seed: 21, ..TrainConfig::default() };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| pretrain_ensemble(&reference, &arch, 3, &config).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one, three);
    let user = synth::generate(&ScenarioSpec::new(200, 5, 0.6, 5)).unwrap();
    let pick = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| one.select_for_labeling(&user, 0.05).unwrap())
    };
    assert_eq!(pick(1), pick(4));
}

// ---- monitor ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn estimate_ignores_order_and_duplication(seed in any::<u64>(), n in 1usize..80, th in 0.05f64..0.95) {
        let ens = random_ensemble(4, 3, seed);
        let user = random_dataset(n, 4, seed ^ 1, 0.0);
        let opts = EstimateOptions { threshold: th, ..Default::default() };
        let base = ens.estimate_accuracy(&user, opts).unwrap();
        let perm = ens.estimate_accuracy(&shuffled(&user, seed), opts).unwrap();
        let dup = ens.estimate_accuracy(&doubled(&user), opts).unwrap();
        prop_assert_eq!(&base.per_model, &perm.per_model);
        prop_assert_eq!(&base.per_model, &dup.per_model);
        prop_assert_eq!(base.mean, dup.mean);
    }

    #[test]
    fn std_is_zero_exactly_when_members_agree(seed in any::<u64>(), n in 1usize..30) {
        let ens = random_ensemble(3, 4, seed);
        let user = random_dataset(n, 3, seed ^ 2, 0.0);
        let est = ens.estimate_accuracy(&user, EstimateOptions::default()).unwrap();
        let counts: HashSet<u64> = est.per_model.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(est.std == 0.0, counts.len() == 1);
    }

    #[test]
    fn raising_threshold_never_raises_an_estimate(seed in any::<u64>(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let ens = random_ensemble(4, 3, seed);
        let user = random_dataset(50, 4, seed ^ 3, 0.0);
        let low = ens.estimate_accuracy(&user, EstimateOptions { threshold: lo, ..Default::default() }).unwrap();
        let high = ens.estimate_accuracy(&user, EstimateOptions { threshold: hi, ..Default::default() }).unwrap();
        for (l, h) in low.per_model.iter().zip(&high.per_model) {
            prop_assert!(h <= l);
        }
    }

    #[test]
    fn empty_labeled_subset_leaves_estimate_unblended(seed in any::<u64>()) {
        let ens = random_ensemble(4, 2, seed);
        let user = random_dataset(30, 4, seed, 0.0);
        let empty = Dataset::new(Vec::new()).unwrap();
        let plain = ens.estimate_accuracy(&user, EstimateOptions::default()).unwrap();
        let with_empty = ens
            .estimate_accuracy(&user, EstimateOptions { labeled_subset: Some(&empty), ..Default::default() })
            .unwrap();
        prop_assert_eq!(plain.value(), with_empty.value());
        prop_assert_eq!(with_empty.value(), with_empty.mean);
    }

    #[test]
    fn selection_equals_full_sort(seed in any::<u64>(), n in 1usize..120, budget in 0.01f64..1.0) {
        let ens = random_ensemble(3, 3, seed);
        let user = random_dataset(n, 3, seed ^ 4, 0.0);
        let entropies: Vec<f64> = user.records().iter().map(|r| {
            let scores = ens.member_scores(r.id(), r.probs()).unwrap();
            scores.iter().map(|&s| binary_entropy(s)).sum::<f64>() / scores.len() as f64
        }).collect();
        let k = ((budget * n as f64) - 1e-9).ceil().max(1.0) as usize;
        let expected: Vec<String> = full_sort_top_k(&entropies, k)
            .into_iter().map(|i| user.records()[i].id().to_string()).collect();
        prop_assert_eq!(ens.select_for_labeling(&user, budget).unwrap(), expected);
    }

    #[test]
    fn top_k_with_heavy_ties(values in prop::collection::vec(0u8..4, 1..60), k in 1usize..60) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64 * 0.1).collect();
        let k = k.min(v.len());
        prop_assert_eq!(top_k_by_entropy(&v, k), full_sort_top_k(&v, k));
    }
}

// ---- baselines ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn threshold_estimators_are_monotone(seed in any::<u64>(), a in 0.0f64..2.5, b in 0.0f64..2.5) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let ds = random_dataset(60, 6, seed, 0.0);
        prop_assert!(estimate_mp(&ds, hi) <= estimate_mp(&ds, lo));
        prop_assert!(estimate_entropy(&ds, hi) >= estimate_entropy(&ds, lo));
    }

    #[test]
    fn unit_temperature_is_mp_star(seed in any::<u64>(), n in 1usize..100, classes in 2usize..12) {
        let ds = random_dataset(n, classes, seed, 0.0);
        prop_assert_eq!(estimate_ts(&ds, 1.0).unwrap(), estimate_mp_star(&ds).unwrap());
    }

    #[test]
    fn fitted_nll_beats_endpoints_and_identity(seed in any::<u64>(), n in 1usize..80) {
        let ds = random_dataset(n, 5, seed, 1.0);
        let fit = fit_temperature(&ds).unwrap();
        prop_assert!((TEMPERATURE_MIN..=TEMPERATURE_MAX).contains(&fit.temperature));
        for t in [TEMPERATURE_MIN, 1.0, TEMPERATURE_MAX] {
            prop_assert!(fit.nll <= temperature_nll(&ds, t).unwrap() + 1e-12);
        }
    }

    #[test]
    fn estimators_ignore_record_order(seed in any::<u64>(), n in 2usize..80) {
        let ds = random_dataset(n, 4, seed, 1.0);
        let perm = shuffled(&ds, seed.wrapping_add(1));
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        prop_assert_eq!(estimate_mp(&ds, 0.5), estimate_mp(&perm, 0.5));
        prop_assert_eq!(estimate_entropy(&ds, 0.9), estimate_entropy(&perm, 0.9));
        prop_assert!(close(estimate_mp_star(&ds).unwrap(), estimate_mp_star(&perm).unwrap()));
        prop_assert!(close(estimate_ts(&ds, 2.0).unwrap(), estimate_ts(&perm, 2.0).unwrap()));
        for kind in [ThresholdKind::Mp, ThresholdKind::Entropy] {
            prop_assert_eq!(calibrate_threshold(&ds, kind).unwrap(), calibrate_threshold(&perm, kind).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn random_sampling_mean_converges(seed in any::<u64>(), fraction in 0.01f64..0.2) {
        let ds = random_dataset(2000, 2, seed, 1.0);
        let truth = true_accuracy(&ds).unwrap();
        let rs = estimate_rs(&ds, fraction, 100, seed).unwrap();
        let se = (truth * (1.0 - truth) / rs.sample_size as f64 / 100.0).sqrt();
        prop_assert!((rs.mean - truth).abs() <= 3.0 * se, "{} vs {} (se {})", rs.mean, truth, se);
    }
}

// ---- metrics ----

fn labels_with_positive(bits: &[bool]) -> Vec<bool> {
    let mut v = bits.to_vec();
    if !v.iter().any(|&b| b) {
        v[0] = true;
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn aupr_matches_brute_force(
        pairs in prop::collection::vec((0u8..6, any::<bool>()), 1..=12)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 5.0).collect();
        let labels = labels_with_positive(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let got = aupr(&scores, &CorrectnessVector::from_bools(labels.clone()), PositiveClass::Correct).unwrap();
        prop_assert!((got - brute_force_aupr(&scores, &labels)).abs() < 1e-9);
    }

    #[test]
    fn aupr_survives_monotone_transforms(
        pairs in prop::collection::vec((0u8..20, any::<bool>()), 1..40)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 4.0).collect();
        let labels = CorrectnessVector::from_bools(labels_with_positive(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()));
        let base = aupr(&scores, &labels, PositiveClass::Correct).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s - 7.0).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert_eq!(base, aupr(&cubed, &labels, PositiveClass::Correct).unwrap());
        prop_assert_eq!(base, aupr(&exp, &labels, PositiveClass::Correct).unwrap());
    }

    #[test]
    fn pr_curve_is_well_formed(
        pairs in prop::collection::vec((0u8..10, any::<bool>()), 1..50)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let labels = CorrectnessVector::from_bools(labels_with_positive(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()));
        let curve = pr_curve(&scores, &labels, PositiveClass::Correct).unwrap();
        let distinct: HashSet<u8> = pairs.iter().map(|p| p.0).collect();
        prop_assert_eq!(curve.points.len(), distinct.len());
        for w in curve.points.windows(2) {
            prop_assert!(w[0].recall <= w[1].recall);
            prop_assert!(w[0].threshold > w[1].threshold);
        }
        prop_assert!(curve.points.iter().all(|p| (0.0..=1.0).contains(&p.precision)));
        let last = curve.points.last().unwrap();
        prop_assert_eq!(last.recall, 1.0);
        prop_assert_eq!(last.precision, curve.positive_ratio);
    }
}

// ---- synth ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn split_partitions_ids(seed in any::<u64>(), n in 1usize..200, a in 0.0f64..1.0) {
        let ds = synth::generate(&ScenarioSpec::new(n, 3, 0.8, seed)).unwrap();
        let fractions = [a * 0.5, a * 0.5, 1.0 - a];
        let parts = synth::split(&ds, &fractions, seed).unwrap();
        let mut ids: Vec<&str> = parts.iter().flat_map(|p| p.ids()).collect();
        prop_assert_eq!(ids.len(), n);
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }

    #[test]
    fn generation_is_deterministic_and_valid(
        seed in any::<u64>(), acc in 0.05f64..1.0, distortion in 0.2f64..4.0, null in 0.0f64..0.5
    ) {
        let spec = ScenarioSpec::new(150, 7, acc, seed).with_distortion(distortion).with_null_fraction(null);
        let a = synth::generate(&spec).unwrap();
        let b = synth::generate(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        for r in a.records() {
            let sum: f64 = r.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(r.probs().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
