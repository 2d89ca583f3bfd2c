use nalgebra::DMatrix;
use proptest::prelude::*;

use descentlab::data::{self, one_hot, read_cache, write_cache, Sampling};
use descentlab::features::FeatureMap;
use descentlab::mlp::{init_mlp, validation_split, EarlyStopper, StopDecision, TrainConfig};
use descentlab::solver::{anchored_ridge_solve, min_norm_solve, replicated_anchor, RidgeProblem};
use descentlab::sweep::{summarize, CurvePoint, Experiment, SweepConfig, STATUS_OK};

fn matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    descentlab::oracle::random_rank_matrix(seed, rows, cols, rows.min(cols))
}

fn inputs(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    matrix(rows, cols, seed).map(|v| v.abs().min(1.0))
}

fn point(capacity: usize, test_mse: f64) -> CurvePoint {
    CurvePoint {
        experiment: Experiment::FeatureSweep,
        seed: 0,
        capacity,
        num_params: capacity,
        lambda: 1e-8,
        r: 0.0,
        train_mse: 0.0,
        test_mse,
        train_error_rate: 0.0,
        test_error_rate: 0.0,
        weight_l2: 0.0,
        epochs_trained: None,
        wall_time_ms: 0.0,
        status: STATUS_OK.into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn feature_maps_nest(seed in any::<u64>(), p in 1usize..12, d in 0usize..20, extra in 0usize..10) {
        let x = inputs(7, p, seed ^ 1);
        let small = FeatureMap::new(seed, p, d, 1.0, true).transform(&x).unwrap();
        let big = FeatureMap::new(seed, p, d + extra, 1.0, true).transform(&x).unwrap();
        prop_assert_eq!(small.columns(0, d), big.columns(0, d));
        prop_assert!(small.column(d).iter().all(|&v| v == 1.0));
        prop_assert!(big.columns(0, d + extra).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ridge_solution_satisfies_normal_equations(
        seed in any::<u64>(),
        n in 1usize..12,
        m in 1usize..16,
        k in 1usize..4,
        log_lambda in -6.0f64..3.0,
        r in 0.0f64..5.0,
    ) {
        let phi = matrix(n, m, seed);
        let z = matrix(n, k, seed.wrapping_add(1));
        let anchor = replicated_anchor(seed.wrapping_add(2), m, k, r);
        let prob = RidgeProblem::new(phi, z, 10f64.powf(log_lambda), Some(anchor)).unwrap();
        let sol = anchored_ridge_solve(&prob).unwrap();
        prop_assert!(prob.normal_residual(&sol.weights) <= prob.residual_tolerance(),
            "residual {} > {}", prob.normal_residual(&sol.weights), prob.residual_tolerance());
    }

    #[test]
    fn min_norm_solution_lies_in_the_row_space(seed in any::<u64>(), n in 1usize..8, extra in 0usize..8, k in 1usize..3) {
        let m = n + extra;
        let phi = matrix(n, m, seed);
        let z = matrix(n, k, seed.wrapping_add(1));
        let w = min_norm_solve(&phi, &z).weights;
        prop_assert!((&phi * &w - &z).norm() <= 1e-8 * (1.0 + z.norm()));
        // Projecting onto the row space of Φ leaves w unchanged.
        let proj = phi.transpose() * (&phi * phi.transpose()).try_inverse().unwrap() * &phi * &w;
        prop_assert!((proj - &w).norm() <= 1e-7 * (1.0 + w.norm()));
    }

    #[test]
    fn growth_keeps_existing_neurons(seed in any::<u64>(), p in 1usize..6, h in 0usize..6, add in 0usize..6, k in 1usize..4) {
        let s = init_mlp(seed, p, h, k, 1.0).unwrap();
        let g = s.grow_hidden(seed.wrapping_add(9), h + add).unwrap();
        prop_assert_eq!(g.hidden(), h + add);
        prop_assert_eq!(g.w1.rows(0, h), s.w1.rows(0, h));
        prop_assert_eq!(g.w2.columns(0, h), s.w2.columns(0, h));
        prop_assert_eq!(g.b1.rows(0, h), s.b1.rows(0, h));
        prop_assert_eq!(&g.b2, &s.b2);
        prop_assert!(g.b1.rows(h, add).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged(seed in any::<u64>(), h in 1usize..6, batch in 1usize..9) {
        let x = inputs(8, 3, seed);
        let z = one_hot(&(0..8).map(|i| i % 2).collect::<Vec<_>>(), 2);
        let before = init_mlp(seed, 3, h, 2, 1.0).unwrap();
        let mut after = before.clone();
        let cfg = TrainConfig { learning_rate: 0.0, batch_size: batch, ..TrainConfig::default() };
        after.sgd_epoch(&x, &z, &cfg, seed).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn early_stopper_tracks_first_minimum(vals in prop::collection::vec(0.0f64..1.0, 1..40), patience in 1usize..6) {
        let mut stopper = EarlyStopper::new(patience);
        let mut seen = Vec::new();
        for (epoch, &v) in vals.iter().enumerate() {
            seen.push(v);
            if stopper.observe(epoch, v) == StopDecision::Stop {
                break;
            }
        }
        let best = seen.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = seen.iter().position(|&v| v == best).unwrap();
        prop_assert_eq!(stopper.best_epoch(), Some(first));
    }

    #[test]
    fn validation_split_partitions_train(n in 0usize..60, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let train: Vec<usize> = (100..100 + n).collect();
        let (fit, val) = validation_split(&train, frac, seed);
        let mut all: Vec<usize> = fit.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, train);
        if n >= 2 {
            prop_assert!(!fit.is_empty() && !val.is_empty());
        }
    }

    #[test]
    fn splits_are_disjoint_and_one_hot_rows_sum_to_one(
        seed in any::<u64>(),
        n_train in 0usize..20,
        n_test in 0usize..20,
        balanced in any::<bool>(),
    ) {
        let full = data::synth_gaussian_classes(seed, 10, 4, 3, 1.0).unwrap();
        let sampling = if balanced { Sampling::Balanced } else { Sampling::Uniform };
        let ds = data::subsample_and_split_with(&full, seed, n_train, n_test, sampling).unwrap();
        prop_assert_eq!(ds.split.train.len(), n_train);
        prop_assert_eq!(ds.split.test.len(), n_test);
        prop_assert!(ds.split.train.iter().all(|i| !ds.split.test.contains(i)));
        for r in 0..ds.targets.nrows() {
            prop_assert_eq!(ds.targets.row(r).sum(), 1.0);
        }
        prop_assert!(ds.inputs.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cache_round_trip_is_bit_identical(seed in any::<u64>(), n_train in 0usize..15) {
        let ds = data::subsample_and_split(&data::synth_gaussian_classes(seed, 8, 3, 5, 2.0).unwrap(), seed, n_train, 24 - n_train).unwrap();
        let mut buf = Vec::new();
        write_cache(&ds, &mut buf).unwrap();
        let back = read_cache(buf.as_slice()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn config_render_parses_back(
        seed in any::<u64>(),
        repeats in 1usize..5,
        lambdas in prop::collection::vec(1e-10f64..1e4, 1..4),
        hs in prop::collection::btree_set(1usize..80, 1..6),
        switch in prop::option::of(1usize..60),
        lr in 1e-4f64..2.0,
    ) {
        let mut cfg = SweepConfig::default();
        cfg.seed = seed;
        cfg.repeats = repeats;
        cfg.lambda_grid = lambdas;
        cfg.h_grid = hs.into_iter().collect();
        cfg.switch_off_h = switch;
        cfg.learning_rate = lr;
        let back = SweepConfig::from_text(&cfg.render()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn summary_peak_dominates_interior(vals in prop::collection::vec(1e-3f64..10.0, 3..20)) {
        let pts: Vec<CurvePoint> = vals.iter().enumerate().map(|(i, &v)| point(i + 1, v)).collect();
        let s = summarize(&pts).unwrap();
        let interior = &vals[1..vals.len() - 1];
        prop_assert!(interior.iter().all(|&v| v <= s.peak_test_mse));
        prop_assert_eq!(s.tail_test_mse, *vals.last().unwrap());
        prop_assert!((s.second_descent_ratio - s.peak_test_mse / s.tail_test_mse).abs() <= 1e-12 * s.second_descent_ratio);
        prop_assert!(s.largest_drop_capacity.is_some_and(|c| (2..=vals.len()).contains(&c)));
    }
}
