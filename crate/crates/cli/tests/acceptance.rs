//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criteria 1-4 train on MNIST, read from `POFL_MNIST_DIR` or
//! `<workspace>/data/mnist`. When the files are absent these criteria are
//! reported as SKIP, unless `POFL_REQUIRE_MNIST` is set, in which case they
//! fail.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use pofl_core::aircomp::{
    self, analytic_distortion, design_transceiver, gradient_stats, simulate_aggregation,
};
use pofl_core::channel::{draw_channels, ChannelConfig};
use pofl_core::config::PolicyKind;
use pofl_core::data::generate_synthetic;
use pofl_core::model::{batch_gradient, batch_loss};
use pofl_core::oracle::{enumerate_schedule_distribution, monte_carlo_mean, solve_p2_numeric};
use pofl_core::rng::{stream_rng, SimRng};
use pofl_core::scheduling::{
    self, aggregation_weights, sample_without_replacement, Policy, ScheduleInputs,
};
use pofl_core::trainer::{run_experiment, Spread};
use pofl_core::{DatasetSpec, ExperimentConfig, TrainingData};

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Report {
    failures: usize,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, verdict: Verdict, detail: String) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                self.failures += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag} criterion {id:>2} {name}: {detail}");
    }

    fn check(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        let verdict = if pass { Verdict::Pass } else { Verdict::Fail };
        self.record(id, name, verdict, detail);
    }
}

fn normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}

fn default_channel(n: usize, rng: &mut SimRng) -> ChannelConfig {
    let d = ExperimentConfig::default();
    ChannelConfig::with_uniform_distances(
        d.antenna_gain,
        d.carrier_freq,
        d.path_loss_exponent,
        d.noise_power,
        d.tx_power,
        n,
        (d.distance_min, d.distance_max),
        rng,
    )
    .unwrap()
}

// Criterion 5: the reweighted over-the-air aggregate is unbiased for the
// data-weighted gradient sum under every policy's probabilities.
fn unbiasedness(report: &mut Report) {
    const N: usize = 30;
    const D: usize = 6;
    const DRAWS: usize = 100_000;
    let noise_power = 1e-11;
    let mut rng = stream_rng(501, 0);
    let counts: Vec<usize> = (0..N).map(|_| rng.random_range(100..3000)).collect();
    let total: usize = counts.iter().sum();
    let grads: Vec<Vec<f64>> = (0..N)
        .map(|i| {
            let offset = (i % 5) as f64 - 2.0;
            (0..D).map(|_| offset + normal(&mut rng)).collect()
        })
        .collect();
    let target: Vec<f64> = (0..D)
        .map(|d| {
            (0..N)
                .map(|i| counts[i] as f64 / total as f64 * grads[i][d])
                .sum()
        })
        .collect();
    let channel = default_channel(N, &mut rng);
    let h = draw_channels(&channel, &mut rng).unwrap().magnitudes();
    let stats: Vec<_> = grads.iter().map(|g| gradient_stats(g)).collect();
    let inputs = ScheduleInputs {
        sample_counts: counts.clone(),
        h_magnitudes: h.clone(),
        grad_norms: stats.iter().map(|s| s.norm).collect(),
        v_tilde: aircomp::v_tilde(&stats, &counts),
        dim: D,
        noise_power,
        tx_power: 1.0,
    };

    let mut worst = 0.0f64;
    let mut all_ok = true;
    let mut failing = Vec::new();
    for (pi, kind) in PolicyKind::ALL.into_iter().enumerate() {
        let p = match kind {
            // Uniform probabilities, reweighted like every other policy.
            PolicyKind::Deterministic => vec![1.0 / N as f64; N],
            _ => scheduling::single_probs(&kind.with_alpha(0.1), &inputs).unwrap(),
        };
        for s in [1usize, 5, 30] {
            let mut sched = stream_rng(502, (pi * 100 + s) as u64);
            let mut noise = stream_rng(503, (pi * 100 + s) as u64);
            let est = monte_carlo_mean(
                || {
                    let outcome = sample_without_replacement(&p, s, &mut sched).unwrap();
                    let rho = aggregation_weights(&outcome, &counts);
                    let picked: Vec<&[f64]> = outcome
                        .selected
                        .iter()
                        .map(|&d| grads[d].as_slice())
                        .collect();
                    let hs: Vec<f64> = outcome.selected.iter().map(|&d| h[d]).collect();
                    simulate_aggregation(&picked, rho.as_slice(), &hs, 1.0, noise_power, &mut noise)
                        .unwrap()
                        .estimate
                },
                DRAWS,
            )
            .unwrap();
            let ok = est
                .mean
                .iter()
                .zip(&est.stderr)
                .zip(&target)
                .all(|((m, se), t)| (m - t).abs() <= 3.0 * se + 1e-12);
            worst = worst.max(est.max_z(&target));
            if !ok {
                all_ok = false;
                failing.push(format!("{kind}/S={s}"));
            }
        }
    }
    report.check(
        5,
        "unbiased aggregation",
        all_ok,
        format!(
            "5 policies x S in {{1,5,30}}, {DRAWS} draws each; max |mean - target| / stderr = {worst:.2} (limit 3){}",
            if failing.is_empty() { String::new() } else { format!("; failing {}", failing.join(", ")) }
        ),
    );
}

/// Distortion of an exactly aligned design: with `b_i = rho_i a / |h_i|`
/// every gradient arrives with its target weight and only the scaled noise
/// remains, `D V sigma^2 / a^2`. Infeasible designs return `None`.
fn aligned_mse(
    a: f64,
    rho: &[f64],
    h: &[f64],
    p: f64,
    dim: usize,
    v: f64,
    sigma2: f64,
) -> Option<f64> {
    let feasible = rho
        .iter()
        .zip(h)
        .all(|(r, m)| r * a / m <= p.sqrt() * (1.0 + 1e-12));
    feasible.then(|| dim as f64 * v * sigma2 / (a * a))
}

// Criterion 6: closed-form transceiver against numeric search, and the
// analytic distortion against simulation.
fn transceiver(report: &mut Report) {
    const DIM: usize = 200;
    let sigma2 = 1e-11;
    let mut rng = stream_rng(601, 0);
    let mut worst_gain = f64::NEG_INFINITY;
    for _ in 0..100 {
        let s = rng.random_range(1..=4);
        let rho: Vec<f64> = (0..s).map(|_| rng.random_range(0.05..2.0)).collect();
        let channel = default_channel(s, &mut rng);
        let h = draw_channels(&channel, &mut rng).unwrap().magnitudes();
        let p = rng.random_range(0.1..2.0);
        let v = rng.random_range(1e-4..1.0);
        let design = design_transceiver(&rho, &h, p).unwrap();
        let closed =
            aligned_mse(design.a, &rho, &h, p, DIM, v, sigma2).expect("closed form is feasible");

        let mut best = f64::INFINITY;
        for k in 0..10_000 {
            let a = design.a * 10f64.powf(-3.0 + 4.0 * k as f64 / 9_999.0);
            if let Some(m) = aligned_mse(a, &rho, &h, p, DIM, v, sigma2) {
                best = best.min(m);
            }
        }
        for _ in 0..2_000 {
            // Random transmit scalars inside the power box, pulled back to the
            // largest receive scalar they can all align to.
            let b: Vec<f64> = (0..s).map(|_| rng.random_range(0.0..=p.sqrt())).collect();
            let a = b
                .iter()
                .zip(&rho)
                .zip(&h)
                .map(|((b, r), m)| b * m / r)
                .fold(f64::INFINITY, f64::min);
            if a > 0.0 {
                if let Some(m) = aligned_mse(a, &rho, &h, p, DIM, v, sigma2) {
                    best = best.min(m);
                }
            }
        }
        worst_gain = worst_gain.max((closed - best) / closed);
    }

    let mut worst_ratio = 0.0f64;
    for inst in 0..5u64 {
        let mut r = stream_rng(602, inst);
        let s = 1 + inst as usize % 4;
        let grads: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..DIM).map(|_| 0.1 * normal(&mut r)).collect())
            .collect();
        let rho: Vec<f64> = (0..s).map(|_| r.random_range(0.05..2.0)).collect();
        let channel = default_channel(s, &mut r);
        let h = draw_channels(&channel, &mut r).unwrap().magnitudes();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut noise = stream_rng(603, inst);
        let mut sum = 0.0;
        let mut variance = 0.0;
        const DRAWS: usize = 100_000;
        for _ in 0..DRAWS {
            let out = simulate_aggregation(&refs, &rho, &h, 1.0, sigma2, &mut noise).unwrap();
            sum += out.squared_error();
            variance = out.variance;
        }
        let analytic = analytic_distortion(variance, &rho, &h, 1.0, DIM, sigma2).unwrap();
        worst_ratio = worst_ratio.max((sum / DRAWS as f64 / analytic - 1.0).abs());
    }
    report.check(
        6,
        "transceiver optimality",
        worst_gain <= 1e-6 && worst_ratio <= 0.02,
        format!(
            "100 instances: best numeric improvement {worst_gain:.2e} relative (limit 1e-6); \
             empirical vs analytic distortion worst deviation {:.3}% (limit 2%)",
            worst_ratio * 100.0
        ),
    );
}

// Criterion 7: closed-form scheduling probabilities against the numeric
// optimum of the expected-cost problem.
fn closed_form_probabilities(report: &mut Report) {
    let mut rng = stream_rng(701, 0);
    let mut max_dp = 0.0f64;
    let mut max_gap = f64::NEG_INFINITY;
    for _ in 0..100 {
        let n = rng.random_range(2..=30);
        let alpha = 10f64.powf(rng.random_range(-3.0..2.0));
        let h: Vec<f64> = {
            let channel = default_channel(n, &mut rng);
            draw_channels(&channel, &mut rng).unwrap().magnitudes()
        };
        let inputs = ScheduleInputs {
            sample_counts: (0..n).map(|_| rng.random_range(50..4000)).collect(),
            h_magnitudes: h,
            grad_norms: (0..n).map(|_| rng.random_range(0.01..5.0)).collect(),
            v_tilde: rng.random_range(1e-6..1e-2),
            dim: 7850,
            noise_power: 10f64.powf(rng.random_range(-12.0..-8.0)),
            tx_power: 1.0,
        };
        let closed = scheduling::single_probs(&Policy::Proposed { alpha }, &inputs).unwrap();
        let numeric = solve_p2_numeric(&inputs, alpha, 1e-13).unwrap();
        let cmp = numeric.compare(&closed, &inputs, alpha);
        max_dp = max_dp.max(cmp.max_abs_deviation);
        max_gap = max_gap.max(cmp.relative_gap);
    }
    report.check(
        7,
        "closed-form probabilities",
        max_dp <= 1e-6 && max_gap <= 1e-8,
        format!("100 instances: max |dp| = {max_dp:.2e} (limit 1e-6), max relative objective gap = {max_gap:.2e} (limit 1e-8)"),
    );
}

// Criterion 8: inclusion probabilities of sequential sampling.
fn sampling_law(report: &mut Report) {
    const DRAWS: usize = 1_000_000;
    let p = [0.4, 0.3, 0.2, 0.1];
    let exact = enumerate_schedule_distribution(&p, 2).unwrap();
    let mut rng = stream_rng(801, 0);
    let mut hits = [0usize; 4];
    for _ in 0..DRAWS {
        for &d in &sample_without_replacement(&p, 2, &mut rng)
            .unwrap()
            .selected
        {
            hits[d] += 1;
        }
    }
    let mut worst = 0.0f64;
    for (h, e) in hits.iter().zip(&exact) {
        let sigma = (e * (1.0 - e) / DRAWS as f64).sqrt();
        worst = worst.max((*h as f64 / DRAWS as f64 - e).abs() / sigma);
    }
    report.check(
        8,
        "sampling law",
        worst <= 3.0,
        format!("N=4, S=2, {DRAWS} draws: exact marginals {exact:.4?}, max deviation {worst:.2} sigma (limit 3)"),
    );
}

// Criterion 9: analytic softmax gradients against central differences.
fn gradient_check(report: &mut Report) {
    let ds = generate_synthetic(300, 6, 4, 901).unwrap();
    let dim = ds.model_dim();
    let mut rng = stream_rng(902, 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let w: Vec<f64> = (0..dim).map(|_| 0.5 * normal(&mut rng)).collect();
        let size = rng.random_range(1..=32);
        let batch = index::sample(&mut rng, ds.len(), size).into_vec();
        let g = batch_gradient(&w, &ds, &batch).unwrap();
        let step = 1e-6;
        let mut err = 0.0;
        for j in 0..dim {
            let mut up = w.clone();
            let mut down = w.clone();
            up[j] += step;
            down[j] -= step;
            let fd = (batch_loss(&up, &ds, &batch).unwrap()
                - batch_loss(&down, &ds, &batch).unwrap())
                / (2.0 * step);
            err += (fd - g.0[j]) * (fd - g.0[j]);
        }
        worst = worst.max(err.sqrt() / g.norm().max(1e-12));
    }
    report.check(
        9,
        "gradient correctness",
        worst <= 1e-5,
        format!("50 (w, batch) pairs: worst ||fd - analytic|| / ||analytic|| = {worst:.2e} (limit 1e-5)"),
    );
}

// Criterion 10: identical seeds give byte-identical CSV, also when trials
// run concurrently.
fn determinism(report: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str]| -> Vec<u8> {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_pofl"))
            .args([
                "--dataset",
                "synthetic",
                "--devices",
                "10",
                "--num-scheduled",
                "3",
                "--rounds",
                "15",
                "--trials",
                "3",
                "--out",
            ])
            .arg(&out)
            .args(extra)
            .output()
            .unwrap();
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let c = run("c", &["--parallel-trials", "3"]);
    report.check(
        10,
        "determinism",
        !a.is_empty() && a == b && a == c,
        format!(
            "{} CSV bytes; repeat run identical: {}; parallel run identical: {}",
            a.len(),
            a == b,
            a == c
        ),
    );
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("POFL_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

type Key = (PolicyKind, u64, usize, u64);

/// Mean best and final test accuracy per configuration, computed once.
struct MnistRuns {
    data: TrainingData,
    dir: PathBuf,
    cache: HashMap<Key, (Spread, Spread)>,
}

impl MnistRuns {
    fn get(
        &mut self,
        policy: PolicyKind,
        noise_power: f64,
        scheduled: usize,
        alpha: f64,
    ) -> (Spread, Spread) {
        let key = (policy, noise_power.to_bits(), scheduled, alpha.to_bits());
        if let Some(v) = self.cache.get(&key) {
            return *v;
        }
        let cfg = ExperimentConfig {
            policy,
            noise_power,
            num_scheduled: scheduled,
            alpha,
            dataset: DatasetSpec::Mnist(self.dir.clone()),
            full_diagnostics: false,
            ..ExperimentConfig::default()
        };
        let start = Instant::now();
        let result = run_experiment(&cfg, &self.data).unwrap();
        let s = result.summary;
        eprintln!(
            "  ran {policy} sigma2={noise_power:e} S={scheduled} alpha={alpha}: best {:.4} +- {:.4}, final {:.4} +- {:.4} ({:.0?})",
            s.best_accuracy.mean,
            s.best_accuracy.stderr,
            s.final_accuracy.mean,
            s.final_accuracy.stderr,
            start.elapsed()
        );
        self.cache.insert(key, (s.best_accuracy, s.final_accuracy));
        (s.best_accuracy, s.final_accuracy)
    }
}

fn mnist_criteria(report: &mut Report) {
    let dir = mnist_dir();
    let data = match TrainingData::mnist(&dir) {
        Ok(d) => d,
        Err(e) => {
            let verdict = if std::env::var_os("POFL_REQUIRE_MNIST").is_some() {
                Verdict::Fail
            } else {
                Verdict::Skip
            };
            for (id, name) in [
                (1, "reference accuracy"),
                (2, "noise ordering"),
                (3, "alpha ordering"),
                (4, "policy ordering"),
            ] {
                report.record(
                    id,
                    name,
                    verdict,
                    format!("MNIST unavailable at {}: {e}", dir.display()),
                );
            }
            return;
        }
    };
    let mut runs = MnistRuns {
        data,
        dir,
        cache: HashMap::new(),
    };
    use PolicyKind::{Channel, Importance, Proposed};

    let (base, _) = runs.get(Proposed, 1e-11, 10, 0.1);
    report.check(
        1,
        "reference accuracy",
        (0.85..=0.89).contains(&base.mean),
        format!(
            "mean best test accuracy {:.4} +- {:.4} over 10 trials (band [0.85, 0.89])",
            base.mean, base.stderr
        ),
    );

    let (low, _) = runs.get(Proposed, 1e-12, 10, 0.1);
    let (high, _) = runs.get(Proposed, 1e-9, 10, 0.1);
    let gap = |a: Spread, b: Spread| (a.mean - b.mean, a.stderr.hypot(b.stderr));
    let (g1, s1) = gap(low, base);
    let (g2, s2) = gap(base, high);
    report.check(
        2,
        "noise ordering",
        g1 > s1 && g2 > s2,
        format!(
            "1e-12: {:.4}, 1e-11: {:.4}, 1e-9: {:.4}; gaps {g1:.4} (se {s1:.4}), {g2:.4} (se {s2:.4})",
            low.mean, base.mean, high.mean
        ),
    );

    let (big, _) = runs.get(Proposed, 1e-9, 10, 100.0);
    let (small, _) = runs.get(Proposed, 1e-9, 10, 0.001);
    report.check(
        3,
        "alpha ordering",
        big.mean > small.mean,
        format!(
            "at 1e-9: alpha=100 {:.4} +- {:.4} vs alpha=0.001 {:.4} +- {:.4}",
            big.mean, big.stderr, small.mean, small.stderr
        ),
    );

    let mut ok = true;
    let mut parts = Vec::new();
    for s in [10usize, 1] {
        let (_, prop) = runs.get(Proposed, 1e-11, s, 0.1);
        let (_, imp) = runs.get(Importance, 1e-11, s, 0.1);
        let (_, chan) = runs.get(Channel, 1e-11, s, 0.1);
        ok &= prop.mean >= imp.mean && imp.mean > chan.mean;
        if s == 1 {
            ok &= chan.mean < prop.mean.min(imp.mean) - 0.05;
        }
        parts.push(format!(
            "S={s}: proposed {:.4}, importance {:.4}, channel {:.4}",
            prop.mean, imp.mean, chan.mean
        ));
    }
    report.check(
        4,
        "policy ordering",
        ok,
        format!("final accuracy after 100 rounds; {}", parts.join("; ")),
    );
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut report = Report { failures: 0 };
    unbiasedness(&mut report);
    transceiver(&mut report);
    closed_form_probabilities(&mut report);
    sampling_law(&mut report);
    gradient_check(&mut report);
    determinism(&mut report);
    mnist_criteria(&mut report);
    if report.failures > 0 {
        println!("{} acceptance criteria failed", report.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
