use proptest::prelude::*;

use pofl_core::aircomp::{self, denormalize, design_transceiver, normalize, simulate_aggregation};
use pofl_core::channel::{path_loss, ChannelConfig};
use pofl_core::config::{lr_schedule, ExperimentConfig};
use pofl_core::data::{generate_synthetic, partition_shards};
use pofl_core::oracle::{solve_p2_numeric, solve_p2_projected_gradient};
use pofl_core::rng::stream_rng;
use pofl_core::scheduling::{
    aggregation_weights, sample_without_replacement, single_probs, Policy, ScheduleInputs,
};

fn policies() -> impl Strategy<Value = Policy> {
    prop_oneof![
        (1e-3f64..100.0).prop_map(|alpha| Policy::Proposed { alpha }),
        Just(Policy::ImportanceAware),
        Just(Policy::ChannelAware),
        Just(Policy::DeterministicRandom),
        (1e-3f64..100.0).prop_map(|alpha| Policy::NoiseFree { alpha }),
    ]
}

fn schedule_inputs() -> impl Strategy<Value = ScheduleInputs> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(1usize..5000, n),
            prop::collection::vec(1e-7f64..1e-3, n),
            prop::collection::vec(0.0f64..10.0, n),
            1e-8f64..1.0,
            1usize..10_000,
            prop_oneof![Just(0.0), 1e-13f64..1e-8],
        )
            .prop_map(|(counts, h, norms, v, dim, noise)| ScheduleInputs {
                sample_counts: counts,
                h_magnitudes: h,
                grad_norms: norms,
                v_tilde: v,
                dim,
                noise_power: noise,
                tx_power: 1.0,
            })
    })
}

/// Instances whose optimal probabilities stay within a few orders of
/// magnitude, where first-order descent converges in reasonable time.
fn moderate_inputs() -> impl Strategy<Value = ScheduleInputs> {
    (2usize..20).prop_flat_map(|n| {
        (
            prop::collection::vec(100usize..3000, n),
            prop::collection::vec(1e-6f64..1e-4, n),
            prop::collection::vec(0.1f64..10.0, n),
            1e-6f64..1e-2,
            prop_oneof![Just(0.0), 1e-12f64..1e-9],
        )
            .prop_map(|(counts, h, norms, v, noise)| ScheduleInputs {
                sample_counts: counts,
                h_magnitudes: h,
                grad_norms: norms,
                v_tilde: v,
                dim: 7850,
                noise_power: noise,
                tx_power: 1.0,
            })
    })
}

fn probability_vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, 1..12).prop_map(|raw| {
        let total: f64 = raw.iter().sum();
        raw.iter().map(|x| x / total).collect()
    })
}

proptest! {
    #[test]
    fn probabilities_form_a_distribution(policy in policies(), inputs in schedule_inputs()) {
        // An all-zero gradient set is degenerate for importance-aware scoring.
        prop_assume!(inputs.grad_norms.iter().any(|g| *g > 0.0));
        let p = single_probs(&policy, &inputs).unwrap();
        prop_assert_eq!(p.len(), inputs.n_devices());
        prop_assert!(p.iter().all(|x| *x > 0.0 && *x <= 1.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn numeric_solvers_agree(inputs in moderate_inputs(), alpha in 1e-2f64..10.0) {
        let bisect = solve_p2_numeric(&inputs, alpha, 1e-13).unwrap();
        let projected = solve_p2_projected_gradient(&inputs, alpha, 20_000).unwrap();
        let gap = bisect
            .p_numeric
            .iter()
            .zip(&projected.p_numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prop_assert!(gap <= 1e-6, "max |dp| = {gap}");
    }

    #[test]
    fn closed_form_matches_bisection(inputs in schedule_inputs(), alpha in 1e-3f64..100.0) {
        prop_assume!(inputs.grad_norms.iter().all(|g| *g > 1e-3));
        let closed = single_probs(&Policy::Proposed { alpha }, &inputs).unwrap();
        let check = solve_p2_numeric(&inputs, alpha, 1e-13).unwrap().compare(&closed, &inputs, alpha);
        prop_assert!(check.max_abs_deviation <= 1e-6);
        prop_assert!(check.relative_gap <= 1e-8);
    }

    #[test]
    fn sampling_returns_distinct_devices(p in probability_vector(), seed in any::<u64>(), frac in 0.0f64..1.0) {
        let count = 1 + ((p.len() - 1) as f64 * frac) as usize;
        let out = sample_without_replacement(&p, count, &mut stream_rng(seed, 0)).unwrap();
        prop_assert_eq!(out.len(), count);
        let mut ids = out.sorted_ids();
        ids.dedup();
        prop_assert_eq!(ids.len(), count);
        prop_assert!(out.q_at_selection.iter().all(|q| *q > 0.0 && *q <= 1.0 + 1e-12));
        prop_assert!((out.q_at_selection[0] - p[out.selected[0]]).abs() < 1e-15);
    }

    #[test]
    fn single_pick_weight_is_inverse_probability(p in probability_vector(), seed in any::<u64>()) {
        let counts: Vec<usize> = (0..p.len()).map(|i| 10 + 7 * i).collect();
        let total: usize = counts.iter().sum();
        let out = sample_without_replacement(&p, 1, &mut stream_rng(seed, 1)).unwrap();
        let d = out.selected[0];
        let w = aggregation_weights(&out, &counts);
        let expected = counts[d] as f64 / (total as f64 * p[d]);
        prop_assert!((w.0[0] - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn transceiver_meets_power_and_aligns(
        pairs in prop::collection::vec((0.01f64..5.0, 1e-7f64..1e-2), 1..8),
        power in 0.01f64..10.0,
    ) {
        let (rho, h): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let d = design_transceiver(&rho, &h, power).unwrap();
        let limit = power.sqrt();
        prop_assert!(d.b.iter().all(|b| *b <= limit * (1.0 + 1e-12)));
        prop_assert!(d.b.iter().any(|b| (b - limit).abs() <= 1e-12 * limit));
        for ((b, m), r) in d.b.iter().zip(&h).zip(&rho) {
            prop_assert!((b * m / d.a - r).abs() <= 1e-12 * r);
        }
    }

    #[test]
    fn noiseless_aggregation_reproduces_weighted_sum(
        grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 16), 1..6),
        seed in any::<u64>(),
    ) {
        let s = grads.len();
        let rho: Vec<f64> = (0..s).map(|i| 0.2 + 0.3 * i as f64).collect();
        let h: Vec<f64> = (0..s).map(|i| 1e-5 * (1.0 + i as f64)).collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let out = simulate_aggregation(&refs, &rho, &h, 1.0, 0.0, &mut stream_rng(seed, 0)).unwrap();
        let scale = out.target.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for (e, t) in out.estimate.iter().zip(&out.target) {
            prop_assert!((e - t).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn normalization_round_trips(g in prop::collection::vec(-100.0f64..100.0, 2..64)) {
        let stats = aircomp::gradient_stats(&g);
        prop_assume!(stats.variance > 1e-9);
        let back = denormalize(&normalize(&g, stats.mean, stats.variance), stats.mean, stats.variance);
        for (a, b) in g.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn path_loss_positive_and_decreasing(d1 in 10.0f64..50.0, d2 in 10.0f64..50.0) {
        let cfg = ChannelConfig {
            antenna_gain: 4.11,
            carrier_freq: 915e6,
            path_loss_exponent: 3.76,
            noise_power: 1e-11,
            tx_power: 1.0,
            distances: vec![d1],
        };
        let (g1, g2) = (path_loss(d1, &cfg).unwrap(), path_loss(d2, &cfg).unwrap());
        prop_assert!(g1 > 0.0 && g2 > 0.0);
        if d1 < d2 {
            prop_assert!(g1 > g2);
        }
    }

    #[test]
    fn learning_rate_stays_above_floor(t in 0usize..10_000) {
        let cfg = ExperimentConfig::default();
        let now = lr_schedule(t, &cfg);
        prop_assert!(now >= cfg.lr_floor);
        prop_assert!(lr_schedule(t + 1, &cfg) <= now);
    }

    #[test]
    fn shards_partition_is_disjoint(devices in 1usize..12, shards in 1usize..4, seed in any::<u64>()) {
        let ds = generate_synthetic(600, 3, 5, 7).unwrap();
        let part = partition_shards(&ds, devices, shards, seed).unwrap();
        let mut seen = vec![false; ds.len()];
        let shard = ds.len() / (devices * shards);
        for d in 0..part.n_devices() {
            prop_assert_eq!(part.sample_count(d), shard * shards);
            for &i in part.indices(d) {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
    }
}
