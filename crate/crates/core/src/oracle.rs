//! Independent verifiers for the closed-form results.
//!
//! Nothing here calls into the scheduling or transceiver code; every formula
//! is re-derived from the problem statement so that tests can pit the two
//! implementations against each other.

use crate::error::{Error, Result};
use crate::scheduling::{ScheduleInputs, PROBABILITY_FLOOR};

/// Largest device count [`enumerate_schedule_distribution`] accepts.
pub const ENUMERATION_CAP: usize = 8;

const MAX_BISECTION_STEPS: usize = 2000;

/// Per-device cost `c_i` of the single-pick objective `sum_i c_i / p_i + const`.
fn objective_costs(inputs: &ScheduleInputs, alpha: f64) -> Vec<f64> {
    let total: f64 = inputs.sample_counts.iter().map(|&m| m as f64).sum();
    inputs
        .sample_counts
        .iter()
        .zip(&inputs.h_magnitudes)
        .zip(&inputs.grad_norms)
        .map(|((&m, &h), &g)| {
            let share_sq = (m as f64 / total).powi(2);
            let distortion =
                (1.0 + alpha) * inputs.dim as f64 * inputs.noise_power * inputs.v_tilde
                    / (inputs.tx_power * h * h)
                    * share_sq;
            let variance = (1.0 + 1.0 / alpha) * share_sq * g * g;
            distortion + variance
        })
        .collect()
}

/// Expected single-pick objective
/// `(1+a) sum_i D sigma^2 V~ m_i^2 / (p_i P |h_i|^2 M^2) + (1+1/a) sum_i (1/p_i - 1) m_i^2 ||g_i||^2 / M^2`,
/// summed term by term.
pub fn enumerate_expected_objective(p: &[f64], inputs: &ScheduleInputs, alpha: f64) -> f64 {
    let total: f64 = inputs.sample_counts.iter().map(|&m| m as f64).sum();
    let mut distortion = 0.0;
    let mut variance = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        let share = inputs.sample_counts[i] as f64 / total;
        let h = inputs.h_magnitudes[i];
        let g = inputs.grad_norms[i];
        distortion += inputs.dim as f64 * inputs.noise_power * inputs.v_tilde
            / (pi * inputs.tx_power * h * h)
            * share
            * share;
        variance += (1.0 / pi - 1.0) * share * share * g * g;
    }
    (1.0 + alpha) * distortion + (1.0 + 1.0 / alpha) * variance
}

/// Outcome of a numeric solve of the single-pick scheduling problem.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericSolveReport {
    pub p_numeric: Vec<f64>,
    pub objective_numeric: f64,
    /// Worst relative violation of stationarity `c_i / p_i^2 = lambda` over
    /// coordinates strictly inside the box.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// How a candidate (typically the closed form) compares with a numeric optimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormCheck {
    pub objective_closed_form: f64,
    pub max_abs_deviation: f64,
    /// `(closed - numeric) / |numeric|`; nonpositive means the closed form is
    /// at least as good.
    pub relative_gap: f64,
}

impl NumericSolveReport {
    pub fn compare(
        &self,
        p_closed: &[f64],
        inputs: &ScheduleInputs,
        alpha: f64,
    ) -> ClosedFormCheck {
        let objective_closed_form = enumerate_expected_objective(p_closed, inputs, alpha);
        let max_abs_deviation = self
            .p_numeric
            .iter()
            .zip(p_closed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = self.objective_numeric.abs().max(f64::MIN_POSITIVE);
        ClosedFormCheck {
            objective_closed_form,
            max_abs_deviation,
            relative_gap: (objective_closed_form - self.objective_numeric) / scale,
        }
    }
}

fn check_problem(inputs: &ScheduleInputs, alpha: f64, tol: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::invalid(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    inputs.validate()
}

fn stationarity_residual(p: &[f64], costs: &[f64]) -> f64 {
    // Interior coordinates share one multiplier; measure their spread.
    let lambdas: Vec<f64> = p
        .iter()
        .zip(costs)
        .filter(|(&pi, &c)| c > 0.0 && pi > PROBABILITY_FLOOR && pi < 1.0)
        .map(|(&pi, &c)| c / (pi * pi))
        .collect();
    if lambdas.len() < 2 {
        return 0.0;
    }
    let mean = lambdas.iter().sum::<f64>() / lambdas.len() as f64;
    lambdas
        .iter()
        .map(|l| (l - mean).abs() / mean)
        .fold(0.0, f64::max)
}

/// Solves `min sum_i c_i / p_i  s.t. sum p = 1, floor <= p <= 1` by bisection
/// on the simplex multiplier: stationarity gives `p_i = clamp(sqrt(c_i / lambda))`,
/// whose sum is monotone in `lambda`. `tol` bounds `|sum p - 1|`.
pub fn solve_p2_numeric(
    inputs: &ScheduleInputs,
    alpha: f64,
    tol: f64,
) -> Result<NumericSolveReport> {
    check_problem(inputs, alpha, tol)?;
    let costs = objective_costs(inputs, alpha);
    let n = costs.len();

    if costs.iter().all(|&c| c == 0.0) {
        // Every feasible point is optimal.
        let p = vec![1.0 / n as f64; n];
        return Ok(NumericSolveReport {
            objective_numeric: enumerate_expected_objective(&p, inputs, alpha),
            p_numeric: p,
            kkt_residual: 0.0,
            iterations: 0,
        });
    }

    let mass = |log_lambda: f64| -> (f64, Vec<f64>) {
        let lambda = log_lambda.exp();
        let p: Vec<f64> = costs
            .iter()
            .map(|&c| (c / lambda).sqrt().clamp(PROBABILITY_FLOOR, 1.0))
            .collect();
        (p.iter().sum(), p)
    };

    // Sum is decreasing in lambda; bracket the root in log space.
    let (mut lo, mut hi) = (-50.0f64, 50.0f64);
    let mut widen = 0;
    while mass(lo).0 < 1.0 || mass(hi).0 > 1.0 {
        lo -= 50.0;
        hi += 50.0;
        widen += 1;
        if widen > 20 {
            return Err(Error::NoConvergence { iterations: widen });
        }
    }

    for step in 1..=MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let (sum, p) = mass(mid);
        if (sum - 1.0).abs() <= tol || hi - lo < 1e-15 {
            if (sum - 1.0).abs() > tol.max(1e-9) {
                return Err(Error::NoConvergence { iterations: step });
            }
            return Ok(NumericSolveReport {
                objective_numeric: enumerate_expected_objective(&p, inputs, alpha),
                kkt_residual: stationarity_residual(&p, &costs),
                p_numeric: p,
                iterations: step,
            });
        }
        if sum > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_BISECTION_STEPS,
    })
}

/// Euclidean projection onto `{sum x = 1, lo <= x <= 1}`.
fn project_capped_simplex(y: &[f64], lo: f64) -> Vec<f64> {
    let shifted_sum = |tau: f64| -> f64 { y.iter().map(|v| (v - tau).clamp(lo, 1.0)).sum() };
    let mut a = y.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let mut b = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if shifted_sum(mid) > 1.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let tau = 0.5 * (a + b);
    y.iter().map(|v| (v - tau).clamp(lo, 1.0)).collect()
}

/// Second, independent solver: projected gradient descent with backtracking
/// line search, started from the uniform distribution.
pub fn solve_p2_projected_gradient(
    inputs: &ScheduleInputs,
    alpha: f64,
    max_iterations: usize,
) -> Result<NumericSolveReport> {
    check_problem(inputs, alpha, 1.0)?;
    let costs = objective_costs(inputs, alpha);
    let n = costs.len();
    let objective = |p: &[f64]| -> f64 { costs.iter().zip(p).map(|(c, x)| c / x).sum() };

    let mut p = vec![1.0 / n as f64; n];
    let mut f = objective(&p);
    let mut step = 1.0;
    for it in 1..=max_iterations {
        let grad: Vec<f64> = costs.iter().zip(&p).map(|(c, x)| -c / (x * x)).collect();
        step *= 2.0;
        let (next, f_next) = loop {
            let trial: Vec<f64> = p.iter().zip(&grad).map(|(x, g)| x - step * g).collect();
            let cand = project_capped_simplex(&trial, PROBABILITY_FLOOR);
            let f_cand = objective(&cand);
            // Sufficient decrease along the projection arc.
            let decrease: f64 = grad
                .iter()
                .zip(cand.iter().zip(&p))
                .map(|(g, (c, x))| g * (c - x))
                .sum::<f64>()
                + cand
                    .iter()
                    .zip(&p)
                    .map(|(c, x)| (c - x) * (c - x))
                    .sum::<f64>()
                    / (2.0 * step);
            if f_cand <= f + decrease || step < 1e-300 {
                break (cand, f_cand);
            }
            step *= 0.5;
        };
        let moved = next
            .iter()
            .zip(&p)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let stalled = f - f_next <= 1e-15 * f;
        p = next;
        f = f_next;
        if moved < 1e-14 || (stalled && moved < 1e-10) {
            return Ok(NumericSolveReport {
                objective_numeric: enumerate_expected_objective(&p, inputs, alpha),
                kkt_residual: stationarity_residual(&p, &costs),
                p_numeric: p,
                iterations: it,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iterations,
    })
}

/// Exact probability that each device appears among `count` sequential picks
/// without replacement from `p`, by summing over all ordered outcomes.
pub fn enumerate_schedule_distribution(p: &[f64], count: usize) -> Result<Vec<f64>> {
    let n = p.len();
    if n > ENUMERATION_CAP {
        return Err(Error::TooLarge {
            n,
            cap: ENUMERATION_CAP,
        });
    }
    if count == 0 || count > n {
        return Err(Error::invalid(format!(
            "cannot pick {count} of {n} devices"
        )));
    }

    fn walk(p: &[f64], taken: &mut Vec<bool>, left: usize, prob: f64, marginals: &mut [f64]) {
        if left == 0 {
            return;
        }
        let remaining: f64 = p
            .iter()
            .zip(taken.iter())
            .filter(|(_, &t)| !t)
            .map(|(x, _)| x)
            .sum();
        for i in 0..p.len() {
            if taken[i] {
                continue;
            }
            let branch = prob * p[i] / remaining;
            marginals[i] += branch;
            taken[i] = true;
            walk(p, taken, left - 1, branch, marginals);
            taken[i] = false;
        }
    }

    let mut marginals = vec![0.0; n];
    walk(p, &mut vec![false; n], count, 1.0, &mut marginals);
    Ok(marginals)
}

/// Streaming mean and standard error of a vector-valued estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_trials: usize,
}

impl MeanEstimate {
    /// Whether every coordinate of the mean is within `k` standard errors of
    /// `expected`. Coordinates with zero standard error must match exactly up
    /// to `abs_floor`.
    pub fn within(&self, expected: &[f64], k: f64, abs_floor: f64) -> bool {
        self.mean
            .iter()
            .zip(&self.stderr)
            .zip(expected)
            .all(|((m, s), e)| (m - e).abs() <= k * s + abs_floor)
    }

    /// Largest `|mean - expected| / stderr` over coordinates with positive
    /// standard error.
    pub fn max_z(&self, expected: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.stderr)
            .zip(expected)
            .filter(|((_, s), _)| **s > 0.0)
            .map(|((m, s), e)| (m - e).abs() / s)
            .fold(0.0, f64::max)
    }
}

/// Welford accumulation of `n_trials` draws from `sampler`.
pub fn monte_carlo_mean<F>(mut sampler: F, n_trials: usize) -> Result<MeanEstimate>
where
    F: FnMut() -> Vec<f64>,
{
    if n_trials < 2 {
        return Err(Error::invalid("Monte Carlo needs at least two trials"));
    }
    let first = sampler();
    let mut mean = first;
    let mut m2 = vec![0.0; mean.len()];
    for k in 2..=n_trials {
        let x = sampler();
        if x.len() != mean.len() {
            return Err(Error::invalid("sampler changed its output length"));
        }
        let kf = k as f64;
        for ((mu, s), xi) in mean.iter_mut().zip(m2.iter_mut()).zip(&x) {
            let delta = xi - *mu;
            *mu += delta / kf;
            *s += delta * (xi - *mu);
        }
    }
    let n = n_trials as f64;
    let stderr = m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect();
    Ok(MeanEstimate {
        mean,
        stderr,
        n_trials,
    })
}
