//! Analog over-the-air aggregation.
//!
//! Scheduled devices normalize their gradients with shared statistics,
//! pre-equalize their channels and transmit simultaneously; the server scales
//! the superposed signal and de-normalizes it into an estimate of the weighted
//! gradient sum `sum_i rho_i g_i`.
//!
//! Channels enter only through their magnitudes: the transmit scalar inverts
//! the phase exactly, so the effective gain of every device is real. Receiver
//! noise is modelled as real with per-entry variance `sigma_z^2`, which makes
//! the realized distortion match [`analytic_distortion`] in expectation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Below this global variance the gradients are treated as constant vectors:
/// nothing is transmitted and the server reconstructs the mean exactly.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Per-device summary uploaded alongside scheduling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientStats {
    /// `M_i`
    pub mean: f64,
    /// `V_i`, population variance over the `D` entries.
    pub variance: f64,
    /// `||g_i||_2`
    pub norm: f64,
}

/// Mean, population variance and l2-norm of `g`.
///
/// # Panics
///
/// Panics if `g` is empty.
pub fn gradient_stats(g: &[f64]) -> GradientStats {
    assert!(!g.is_empty(), "gradient statistics of an empty vector");
    let d = g.len() as f64;
    let mean = g.iter().sum::<f64>() / d;
    let variance = g.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    GradientStats {
        mean,
        variance,
        norm,
    }
}

/// Aggregation weights `rho_i` of the scheduled devices, in schedule order.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights(pub Vec<f64>);

impl AggregationWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Statistics broadcast by the server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalStats {
    /// `M_g = sum_{i in S} rho_i M_i`
    pub mean: f64,
    /// `V_g = sum_{i in S} rho_i V_i`
    pub variance: f64,
    /// `sum_{i in N} (m_i / M) V_i`, over all devices.
    pub v_tilde: f64,
}

impl GlobalStats {
    /// `scheduled` pairs with `rho`; `all` pairs with `sample_counts`.
    pub fn new(
        scheduled: &[GradientStats],
        rho: &[f64],
        all: &[GradientStats],
        sample_counts: &[usize],
    ) -> Self {
        let (mean, variance) = weighted_moments(scheduled, rho);
        GlobalStats {
            mean,
            variance,
            v_tilde: v_tilde(all, sample_counts),
        }
    }
}

fn weighted_moments(stats: &[GradientStats], rho: &[f64]) -> (f64, f64) {
    stats.iter().zip(rho).fold((0.0, 0.0), |(m, v), (s, r)| {
        (m + r * s.mean, v + r * s.variance)
    })
}

/// `sum_i (m_i / M) V_i`
pub fn v_tilde(all: &[GradientStats], sample_counts: &[usize]) -> f64 {
    let total: usize = sample_counts.iter().sum();
    all.iter()
        .zip(sample_counts)
        .map(|(s, &m)| m as f64 / total as f64 * s.variance)
        .sum()
}

/// Symbol vector `s = (g - center) / sqrt(variance)`; all zeros when the
/// variance is degenerate.
pub fn normalize(g: &[f64], center: f64, variance: f64) -> Vec<f64> {
    if variance <= DEGENERATE_VARIANCE {
        return vec![0.0; g.len()];
    }
    let inv = variance.sqrt().recip();
    g.iter().map(|x| (x - center) * inv).collect()
}

/// Inverse of [`normalize`]: `sqrt(variance) * s + mean`.
pub fn denormalize(s: &[f64], mean: f64, variance: f64) -> Vec<f64> {
    if variance <= DEGENERATE_VARIANCE {
        return vec![mean; s.len()];
    }
    let sd = variance.sqrt();
    s.iter().map(|x| sd * x + mean).collect()
}

/// Transmit scalar magnitudes `b_i` and receive scalar `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransceiverDesign {
    pub a: f64,
    pub b: Vec<f64>,
}

fn check_link_inputs(rho: &[f64], h: &[f64], tx_power: f64) -> Result<()> {
    if rho.is_empty() || rho.len() != h.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} channels",
            rho.len(),
            h.len()
        )));
    }
    if !(tx_power > 0.0 && tx_power.is_finite()) {
        return Err(Error::invalid(format!(
            "transmit power {tx_power} must be positive"
        )));
    }
    if let Some(r) = rho.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::invalid(format!(
            "aggregation weight {r} must be positive"
        )));
    }
    if let Some(device) = h.iter().position(|m| !(*m > 0.0 && m.is_finite())) {
        return Err(Error::DegenerateChannel { device });
    }
    Ok(())
}

/// MSE-optimal transceiver under per-device power `P`:
/// `a = min_i sqrt(P) |h_i| / rho_i` and `b_i = rho_i a / |h_i|`.
pub fn design_transceiver(rho: &[f64], h: &[f64], tx_power: f64) -> Result<TransceiverDesign> {
    check_link_inputs(rho, h, tx_power)?;
    let sqrt_p = tx_power.sqrt();
    let a = rho
        .iter()
        .zip(h)
        .map(|(r, m)| sqrt_p * m / r)
        .fold(f64::INFINITY, f64::min);
    let b = rho.iter().zip(h).map(|(r, m)| r * a / m).collect();
    Ok(TransceiverDesign { a, b })
}

/// Minimum communication distortion
/// `e_com = D sigma_z^2 V_g / P * max_i rho_i^2 / |h_i|^2`.
pub fn analytic_distortion(
    v_g: f64,
    rho: &[f64],
    h: &[f64],
    tx_power: f64,
    dim: usize,
    noise_power: f64,
) -> Result<f64> {
    check_link_inputs(rho, h, tx_power)?;
    if v_g <= DEGENERATE_VARIANCE {
        return Ok(0.0);
    }
    let worst = rho
        .iter()
        .zip(h)
        .map(|(r, m)| (r / m) * (r / m))
        .fold(0.0, f64::max);
    Ok(dim as f64 * noise_power * v_g / tx_power * worst)
}

/// Result of one over-the-air aggregation.
#[derive(Debug, Clone)]
pub struct AggregationOutput {
    /// Server-side estimate `y_hat`.
    pub estimate: Vec<f64>,
    /// Noiseless target `y = sum_i rho_i g_i`.
    pub target: Vec<f64>,
    pub design: TransceiverDesign,
    /// `M_g`
    pub mean: f64,
    /// `V_g`
    pub variance: f64,
}

impl AggregationOutput {
    /// Realized `||y_hat - y||^2`.
    pub fn squared_error(&self) -> f64 {
        self.estimate
            .iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Runs the full signal chain for the scheduled `gradients`.
///
/// Each device centers its gradient on `M_g / sum(rho)` so that the
/// superposition, de-normalized with `M_g`, reproduces `sum_i rho_i g_i` for
/// arbitrary (not necessarily normalized) weights.
pub fn simulate_aggregation<R: Rng + ?Sized>(
    gradients: &[&[f64]],
    rho: &[f64],
    h: &[f64],
    tx_power: f64,
    noise_power: f64,
    rng: &mut R,
) -> Result<AggregationOutput> {
    check_link_inputs(rho, h, tx_power)?;
    if gradients.len() != rho.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} weights",
            gradients.len(),
            rho.len()
        )));
    }
    let dim = gradients[0].len();
    if dim == 0 || gradients.iter().any(|g| g.len() != dim) {
        return Err(Error::invalid("gradients must share a nonzero length"));
    }
    if !(noise_power >= 0.0 && noise_power.is_finite()) {
        return Err(Error::invalid(format!(
            "noise power {noise_power} must be nonnegative"
        )));
    }

    let stats: Vec<GradientStats> = gradients.iter().map(|g| gradient_stats(g)).collect();
    let (mean, variance) = weighted_moments(&stats, rho);
    let design = design_transceiver(rho, h, tx_power)?;

    let mut target = vec![0.0; dim];
    for (g, r) in gradients.iter().zip(rho) {
        for (t, x) in target.iter_mut().zip(g.iter()) {
            *t += r * x;
        }
    }

    let estimate = if variance <= DEGENERATE_VARIANCE {
        denormalize(&vec![0.0; dim], mean, variance)
    } else {
        let center = mean / rho.iter().sum::<f64>();
        let mut received = vec![0.0; dim];
        for ((g, b), m) in gradients.iter().zip(&design.b).zip(h) {
            let gain = m * b;
            for (y, s) in received.iter_mut().zip(normalize(g, center, variance)) {
                *y += gain * s;
            }
        }
        if noise_power > 0.0 {
            let noise = Normal::new(0.0, noise_power.sqrt()).expect("valid normal");
            for y in received.iter_mut() {
                *y += noise.sample(rng);
            }
        }
        let inv_a = design.a.recip();
        received.iter_mut().for_each(|y| *y *= inv_a);
        denormalize(&received, mean, variance)
    };

    Ok(AggregationOutput {
        estimate,
        target,
        design,
        mean,
        variance,
    })
}
