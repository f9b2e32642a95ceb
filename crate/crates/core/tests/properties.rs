use drm_core::balance::{acceptance_from_frequencies, balance_batch, build_match_index, AcceptanceTable, MatchOptions};
use drm_core::data::EnvDataset;
use drm_core::harness::{select_model, Cell, ResultRow, SelectionMode, TrialRecord};
use drm_core::nn::{grad_check, MlpModel};
use drm_core::train::{groupdro_update, penalty_vrex};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(points: &[(f64, f64, usize, usize)]) -> (EnvDataset, Array2<f64>) {
    let n = points.len();
    let reps = Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { points[i].0 } else { points[i].1 });
    let data = EnvDataset {
        features: reps.clone(),
        labels: points.iter().map(|p| p.2).collect(),
        envs: points.iter().map(|p| p.3).collect(),
        digits: vec![0; n],
        colors: vec![0; n],
        n_classes: 2,
    };
    (data, reps)
}

/// Points on a coarse grid so exact distance ties occur, two envs that each
/// hold both classes.
fn arb_points() -> impl Strategy<Value = Vec<(f64, f64, usize, usize)>> {
    proptest::collection::vec((0i32..5, 0i32..5, 0usize..2, 0usize..2), 4..40).prop_map(|mut v| {
        v[0].2 = 0;
        v[0].3 = 0;
        v[1].2 = 1;
        v[1].3 = 0;
        v[2].2 = 0;
        v[2].3 = 1;
        v[3].2 = 1;
        v[3].3 = 1;
        v.into_iter().map(|(a, b, y, e)| (a as f64 * 0.5, b as f64 * 0.5, y, e)).collect()
    })
}

fn record(trial: usize, step: usize, val: f64, bal: f64, test: f64) -> TrialRecord {
    TrialRecord {
        seed: 0,
        test_env: "t".into(),
        trial,
        algorithm: "erm".into(),
        step,
        lr: 0.0,
        weight_decay: 0.0,
        batch_size: 1,
        hidden_width: 1,
        vrex_beta: 0.0,
        groupdro_eta: 0.0,
        stage1_val_acc: None,
        train_loss: 0.0,
        val_acc: val,
        balanced_val_acc: Some(bal),
        test_acc: test,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_gradients_match_finite_differences(
        dims in proptest::collection::vec(1usize..7, 2..5),
        seed in any::<u64>(),
        raw_input in proptest::collection::vec(-2.0f64..2.0, 6),
    ) {
        let mut dims = dims;
        *dims.last_mut().unwrap() += 1;
        let model = MlpModel::init(&dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let input = &raw_input[..dims[0]];
        let target = (seed as usize) % dims[dims.len() - 1];
        prop_assert!(grad_check(&model, input, target, 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn matches_are_nearest_opposite_label_same_env(points in arb_points()) {
        let (data, reps) = dataset(&points);
        let index = build_match_index(&data, &reps, MatchOptions::default()).unwrap();
        let d2 = |i: usize, j: usize| (reps[[i, 0]] - reps[[j, 0]]).powi(2) + (reps[[i, 1]] - reps[[j, 1]]).powi(2);
        for i in 0..data.len() {
            let j = index.find_match(i).unwrap();
            prop_assert_ne!(data.labels[i], data.labels[j]);
            prop_assert_eq!(data.envs[i], data.envs[j]);
            // Brute-force oracle over all candidates, lowest id on ties.
            let oracle = (0..data.len())
                .filter(|&k| data.labels[k] != data.labels[i] && data.envs[k] == data.envs[i])
                .min_by(|&a, &b| d2(i, a).total_cmp(&d2(i, b)).then(a.cmp(&b)))
                .unwrap();
            prop_assert_eq!(j, oracle);
        }
    }

    #[test]
    fn balanced_batches_keep_originals_first(points in arb_points(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let (data, reps) = dataset(&points);
        let index = build_match_index(&data, &reps, MatchOptions::default()).unwrap();
        let batch: Vec<usize> = (0..data.len()).rev().collect();
        let table = AcceptanceTable::constant(2, p);
        let out = balance_batch(&batch, &index, &table, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&out[..batch.len()], &batch[..]);
        prop_assert!(out.len() <= 2 * batch.len());
        for &j in &out[batch.len()..] {
            prop_assert!(j < data.len());
        }
    }

    #[test]
    fn acceptance_preserves_label_marginal(
        raw_p in proptest::collection::vec(0.05f64..1.0, 2..6),
        raw_m in proptest::collection::vec(0.05f64..1.0, 6),
    ) {
        let k = raw_p.len();
        let sp: f64 = raw_p.iter().sum();
        let sm: f64 = raw_m[..k].iter().sum();
        let p: Vec<f64> = raw_p.iter().map(|v| v / sp).collect();
        let m: Vec<f64> = raw_m[..k].iter().map(|v| v / sm).collect();
        let a = acceptance_from_frequencies(&p, &m).unwrap().probs;
        prop_assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((a.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        let accepted: Vec<f64> = m.iter().zip(&a).map(|(m, a)| m * a).collect();
        let total: f64 = accepted.iter().sum();
        for (acc, target) in accepted.iter().zip(&p) {
            prop_assert!((acc / total - target).abs() < 1e-12);
        }
    }

    #[test]
    fn vrex_penalty_is_permutation_invariant(risks in proptest::collection::vec(0.0f64..5.0, 1..8), rot in 0usize..8) {
        let mut rotated = risks.clone();
        let len = rotated.len();
        rotated.rotate_left(rot % len);
        prop_assert!(penalty_vrex(&risks) >= 0.0);
        prop_assert!((penalty_vrex(&risks) - penalty_vrex(&rotated)).abs() < 1e-12);
    }

    #[test]
    fn groupdro_weights_stay_a_distribution(
        risks in proptest::collection::vec(proptest::collection::vec(0.0f64..3.0, 3), 1..50),
        eta in 0.0f64..1.0,
    ) {
        let mut q = vec![1.0 / 3.0; 3];
        for r in &risks {
            q = groupdro_update(&q, r, eta).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(q.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn selection_maximizes_validation_and_ignores_test(
        vals in proptest::collection::vec((0u8..5, 0u8..5, 0.0f64..1.0), 1..30),
    ) {
        let recs: Vec<TrialRecord> = vals
            .iter()
            .enumerate()
            .map(|(i, &(v, b, t))| record(i % 3, 50 * (i / 3 + 1), v as f64 / 4.0, b as f64 / 4.0, t))
            .collect();
        let mut flipped = recs.clone();
        flipped.iter_mut().for_each(|r| r.test_acc = 1.0 - r.test_acc);
        for mode in [SelectionMode::PlainVal, SelectionMode::BalancedVal] {
            let i = select_model(&recs, mode).unwrap();
            let best = recs[i].validation(mode).unwrap();
            prop_assert!(recs.iter().all(|r| r.validation(mode).unwrap() <= best));
            prop_assert_eq!(Some(i), select_model(&flipped, mode));
        }
    }

    #[test]
    fn min_avg_max_ordering(values in proptest::collection::vec(proptest::option::of(0.0f64..1.0), 1..6)) {
        let row = ResultRow {
            label: "x".into(),
            cells: values.iter().map(|v| v.and_then(|v| Cell::from_values(&[v]))).collect(),
        };
        if let (Some(min), Some(avg)) = (row.min(), row.avg()) {
            let max = values.iter().flatten().cloned().fold(f64::MIN, f64::max);
            prop_assert!(min <= avg + 1e-12 && avg <= max + 1e-12);
        } else {
            prop_assert!(values.iter().all(Option::is_none));
        }
    }
}
