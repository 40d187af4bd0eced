//! Probabilistic device scheduling.
//!
//! A policy turns per-device channel and gradient summaries into single-pick
//! probabilities `p`. The server then draws `S` distinct devices by sampling
//! without replacement, renormalizing the remaining probability mass after
//! every pick, and reweights the picked gradients so the aggregate stays an
//! unbiased estimate of `sum_i (m_i / M) g_i`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aircomp::AggregationWeights;
use crate::error::{Error, Result};

/// Smallest probability handed to a device whose score is exactly zero.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Device scheduling policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Channel and gradient-importance aware, `p_i ∝ Q_i`.
    Proposed { alpha: f64 },
    /// `p_i ∝ (m_i / M) ||g_i||`
    ImportanceAware,
    /// `p_i ∝ |h_i|^2`
    ChannelAware,
    /// Uniform selection, aggregated by data share without reweighting.
    DeterministicRandom,
    /// The proposed rule as if there were no receiver noise.
    NoiseFree { alpha: f64 },
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::Proposed { alpha } | Policy::NoiseFree { alpha }
                if !(alpha > 0.0 && alpha.is_finite()) =>
            {
                Err(Error::invalid(format!(
                    "alpha must be positive, got {alpha}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Whether picked gradients are reweighted by inverse probabilities.
    pub fn reweights(&self) -> bool {
        !matches!(self, Policy::DeterministicRandom)
    }

    /// Multiplier on the model step for `scheduled` picks.
    ///
    /// Inverse-probability weights `m_i / (M p_i)` summed over `S` picks
    /// estimate `S` times the global gradient; the trainer keeps the
    /// aggregate normalized and restores that magnitude in the step.
    /// Data-share aggregation already sums to one.
    pub fn step_multiplier(&self, scheduled: usize) -> f64 {
        if self.reweights() {
            scheduled as f64
        } else {
            1.0
        }
    }
}

/// Everything the server knows when it computes probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleInputs {
    /// `m_i`
    pub sample_counts: Vec<usize>,
    /// `|h_i|`
    pub h_magnitudes: Vec<f64>,
    /// `||g_i||`
    pub grad_norms: Vec<f64>,
    /// `sum_i (m_i / M) V_i`
    pub v_tilde: f64,
    /// Model dimension `D`.
    pub dim: usize,
    /// `sigma_z^2`
    pub noise_power: f64,
    /// `P`
    pub tx_power: f64,
}

impl ScheduleInputs {
    pub fn n_devices(&self) -> usize {
        self.sample_counts.len()
    }

    /// `M`
    pub fn total_samples(&self) -> usize {
        self.sample_counts.iter().sum()
    }

    /// `m_i / M` for every device.
    pub fn data_shares(&self) -> Vec<f64> {
        let total = self.total_samples() as f64;
        self.sample_counts
            .iter()
            .map(|&m| m as f64 / total)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_devices();
        if n == 0 {
            return Err(Error::invalid("no devices to schedule"));
        }
        if self.h_magnitudes.len() != n || self.grad_norms.len() != n {
            return Err(Error::invalid(format!(
                "{n} devices but {} channels and {} gradient norms",
                self.h_magnitudes.len(),
                self.grad_norms.len()
            )));
        }
        if self.sample_counts.contains(&0) {
            return Err(Error::invalid("every device needs at least one sample"));
        }
        if let Some(device) = self
            .h_magnitudes
            .iter()
            .position(|h| !(*h > 0.0 && h.is_finite()))
        {
            return Err(Error::DegenerateChannel { device });
        }
        if self
            .grad_norms
            .iter()
            .any(|g| !(*g >= 0.0 && g.is_finite()))
        {
            return Err(Error::invalid(
                "gradient norms must be finite and nonnegative",
            ));
        }
        let nonneg = [("v_tilde", self.v_tilde), ("noise power", self.noise_power)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if self.dim == 0 || !(self.tx_power > 0.0 && self.tx_power.is_finite()) {
            return Err(Error::invalid(
                "dimension and transmit power must be positive",
            ));
        }
        Ok(())
    }
}

/// `Q_i = sqrt((1+a) V~ D sigma^2 m_i^2 / (P |h_i|^2 M^2) + (1+1/a) m_i^2 ||g_i||^2 / M^2)`
pub fn compute_q(inputs: &ScheduleInputs, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    inputs.validate()?;
    let noise_scale = inputs.v_tilde * inputs.dim as f64 * inputs.noise_power / inputs.tx_power;
    Ok(inputs
        .data_shares()
        .iter()
        .zip(&inputs.h_magnitudes)
        .zip(&inputs.grad_norms)
        .map(|((share, h), g)| {
            let comm = (1.0 + alpha) * noise_scale / (h * h);
            let var = (1.0 + alpha.recip()) * g * g;
            share * (comm + var).sqrt()
        })
        .collect())
}

/// Normalizes nonnegative scores into a distribution, lifting exact zeros to
/// [`PROBABILITY_FLOOR`].
fn normalize_scores(scores: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateProbabilities(format!(
            "scores sum to {total}"
        )));
    }
    let mut p: Vec<f64> = scores
        .iter()
        .map(|s| (s / total).max(PROBABILITY_FLOOR))
        .collect();
    let lifted: f64 = p.iter().sum();
    if lifted != 1.0 {
        p.iter_mut().for_each(|x| *x /= lifted);
    }
    Ok(p)
}

/// Single-pick scheduling probabilities of `policy`.
pub fn single_probs(policy: &Policy, inputs: &ScheduleInputs) -> Result<Vec<f64>> {
    policy.validate()?;
    inputs.validate()?;
    let scores = match *policy {
        Policy::Proposed { alpha } => compute_q(inputs, alpha)?,
        Policy::NoiseFree { alpha } => {
            let quiet = ScheduleInputs {
                noise_power: 0.0,
                ..inputs.clone()
            };
            compute_q(&quiet, alpha)?
        }
        Policy::ImportanceAware => inputs
            .data_shares()
            .iter()
            .zip(&inputs.grad_norms)
            .map(|(s, g)| s * g)
            .collect(),
        Policy::ChannelAware => inputs.h_magnitudes.iter().map(|h| h * h).collect(),
        Policy::DeterministicRandom => vec![1.0; inputs.n_devices()],
    };
    normalize_scores(scores)
}

/// The devices drawn in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleOutcome {
    /// `Y_1, ..., Y_S` in pick order.
    pub selected: Vec<usize>,
    /// Renormalized probability `q` of each pick at the moment it was made.
    pub q_at_selection: Vec<f64>,
    /// Single-pick probabilities the draw started from.
    pub p: Vec<f64>,
}

impl ScheduleOutcome {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Selected device ids in ascending order.
    pub fn sorted_ids(&self) -> Vec<usize> {
        let mut ids = self.selected.clone();
        ids.sort_unstable();
        ids
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    if p.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) {
        return Err(Error::invalid("probabilities must lie in (0, 1]"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// Draws `count` distinct devices. At pick `k` every unselected device `i` is
/// chosen with `q_i = p_i / (1 - sum_{j<k} p_{Y_j})`.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    p: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<ScheduleOutcome> {
    check_distribution(p)?;
    let n = p.len();
    if count == 0 || count > n {
        return Err(Error::invalid(format!(
            "cannot schedule {count} of {n} devices"
        )));
    }
    let mut taken = vec![false; n];
    let mut selected = Vec::with_capacity(count);
    let mut q_at_selection = Vec::with_capacity(count);
    for _ in 0..count {
        // The remaining mass is summed directly rather than as 1 - taken mass,
        // which loses precision once most of the mass is gone.
        let remaining: f64 = p
            .iter()
            .zip(&taken)
            .filter(|(_, &t)| !t)
            .map(|(x, _)| x)
            .sum();
        let target = rng.random::<f64>() * remaining;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, (&pi, &t)) in p.iter().zip(&taken).enumerate() {
            if t {
                continue;
            }
            pick = Some(i);
            acc += pi;
            if target < acc {
                break;
            }
        }
        let pick = pick.expect("at least one device remains");
        taken[pick] = true;
        selected.push(pick);
        q_at_selection.push(p[pick] / remaining);
    }
    Ok(ScheduleOutcome {
        selected,
        q_at_selection,
        p: p.to_vec(),
    })
}

/// Uniform selection of `count` devices, as used by the deterministic baseline.
pub fn sample_uniform<R: Rng + ?Sized>(
    n_devices: usize,
    count: usize,
    rng: &mut R,
) -> Result<ScheduleOutcome> {
    if count == 0 || count > n_devices {
        return Err(Error::invalid(format!(
            "cannot schedule {count} of {n_devices} devices"
        )));
    }
    let selected = index::sample(rng, n_devices, count).into_vec();
    let q_at_selection = (0..count).map(|k| 1.0 / (n_devices - k) as f64).collect();
    Ok(ScheduleOutcome {
        selected,
        q_at_selection,
        p: vec![1.0 / n_devices as f64; n_devices],
    })
}

/// Unbiased weights for sequential picks.
///
/// Pick `k` (1-based) contributes the estimate
/// `z_k = sum_{j<k} y_{Y_j} + y_{Y_k} / q_{Y_k}` with `y_i = (m_i / M) g_i`,
/// whose conditional mean given the earlier picks is the full sum. Averaging
/// the `S` estimates gives device `Y_k` the weight
/// `(m_{Y_k} / M) (1 / q_{Y_k} + S - k) / S`. For `S = 1` this is
/// `m_i / (M p_i)`.
pub fn aggregation_weights(
    outcome: &ScheduleOutcome,
    sample_counts: &[usize],
) -> AggregationWeights {
    let total: usize = sample_counts.iter().sum();
    let s = outcome.len() as f64;
    AggregationWeights(
        outcome
            .selected
            .iter()
            .zip(&outcome.q_at_selection)
            .enumerate()
            .map(|(k, (&dev, &q))| {
                let share = sample_counts[dev] as f64 / total as f64;
                let later = s - (k as f64 + 1.0);
                share * (q.recip() + later) / s
            })
            .collect(),
    )
}

/// Data-share weights `m_i / sum_{j in S} m_j` of the deterministic baseline.
pub fn data_share_weights(
    outcome: &ScheduleOutcome,
    sample_counts: &[usize],
) -> AggregationWeights {
    let total: usize = outcome.selected.iter().map(|&d| sample_counts[d]).sum();
    AggregationWeights(
        outcome
            .selected
            .iter()
            .map(|&d| sample_counts[d] as f64 / total as f64)
            .collect(),
    )
}

/// Weights `policy` applies to `outcome`.
pub fn policy_weights(
    policy: &Policy,
    outcome: &ScheduleOutcome,
    sample_counts: &[usize],
) -> AggregationWeights {
    if policy.reweights() {
        aggregation_weights(outcome, sample_counts)
    } else {
        data_share_weights(outcome, sample_counts)
    }
}
