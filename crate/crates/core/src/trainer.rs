//! The federated training loop with probabilistic scheduling and analog
//! aggregation, plus per-round diagnostics.
//!
//! Each round every device draws one mini-batch gradient at the current
//! model; the server schedules `S` devices from their statistics and the
//! fresh channel, aggregates the scheduled gradients over the air and takes a
//! single step `w <- w - eta_t * c * y_hat`, where `y_hat` estimates the
//! global gradient and `c` is [`Policy::step_multiplier`].

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::aircomp::{self, gradient_stats, GradientStats};
use crate::channel::{draw_channels, ChannelConfig};
use crate::config::{
    learning_rate_advisories, lr_schedule, DatasetSpec, ExperimentConfig, PartitionSpec,
};
use crate::data::{self, Dataset, Partition};
use crate::error::{Error, Result};
use crate::model::{self, batch_loss_and_gradient, Gradient, ModelParams};
use crate::rng::RngBundle;
use crate::scheduling::{self, Policy, ScheduleInputs};

const SYNTHETIC_TRAIN: usize = 6000;
const SYNTHETIC_TEST: usize = 1000;
const SYNTHETIC_FEATURES: usize = 20;
const SYNTHETIC_CLASSES: usize = 10;

/// Train and test splits sharing one class set.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: Dataset,
    pub test: Dataset,
}

impl TrainingData {
    pub fn new(train: Dataset, test: Dataset) -> Result<Self> {
        if train.n_features() != test.n_features() {
            return Err(Error::Consistency(format!(
                "train rows have {} features, test rows {}",
                train.n_features(),
                test.n_features()
            )));
        }
        let classes = train.n_classes().max(test.n_classes());
        Ok(TrainingData {
            train: train.with_n_classes(classes)?,
            test: test.with_n_classes(classes)?,
        })
    }

    /// Loads the standard MNIST file pair from `dir` (train and 10k test split).
    pub fn mnist(dir: &Path) -> Result<Self> {
        let train = data::load_idx(
            dir.join("train-images-idx3-ubyte"),
            dir.join("train-labels-idx1-ubyte"),
        )?;
        let test = data::load_idx(
            dir.join("t10k-images-idx3-ubyte"),
            dir.join("t10k-labels-idx1-ubyte"),
        )?;
        TrainingData::new(train, test)
    }

    /// Gaussian clusters: 6000 training and 1000 test samples, 20 features,
    /// 10 classes.
    pub fn synthetic(seed: u64) -> Result<Self> {
        let all = data::generate_synthetic(
            SYNTHETIC_TRAIN + SYNTHETIC_TEST,
            SYNTHETIC_FEATURES,
            SYNTHETIC_CLASSES,
            seed,
        )?;
        let (train, test) = all.split_at(SYNTHETIC_TRAIN)?;
        TrainingData::new(train, test)
    }

    pub fn load(spec: &DatasetSpec, seed: u64) -> Result<Self> {
        match spec {
            DatasetSpec::Mnist(dir) => TrainingData::mnist(dir),
            DatasetSpec::Synthetic => TrainingData::synthetic(seed),
        }
    }
}

/// Diagnostics logged after each round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Global objective at the model the round started from. Exact when full
    /// diagnostics are on, otherwise the data-weighted mean of this round's
    /// mini-batch losses (an unbiased estimate).
    pub train_loss: f64,
    /// Test accuracy of the model after this round's update.
    pub test_accuracy: f64,
    pub e_com_analytic: f64,
    /// Realized `||y_hat - y||^2`.
    pub e_com_empirical: f64,
    /// Update variance over the uploaded mini-batch gradients.
    pub e_var_mb: f64,
    /// Update variance over exact local gradients, when computed.
    pub e_var_full: Option<f64>,
    pub a_t: f64,
    pub learning_rate: f64,
    /// Cumulative step size including this round.
    pub gamma_t: f64,
    /// Scheduled device ids, ascending.
    pub scheduled: Vec<usize>,
}

/// Mutable state of one trial.
#[derive(Debug, Clone)]
pub struct TrialState {
    pub model: ModelParams,
    pub partition: Partition,
    pub channel: ChannelConfig,
    pub round: usize,
    pub gamma: f64,
    pub rngs: RngBundle,
}

impl TrialState {
    /// Draws the partition and device placement of trial `trial` and starts
    /// from `w = 0`.
    pub fn init(config: &ExperimentConfig, data: &TrainingData, trial: usize) -> Result<Self> {
        config.validate()?;
        let mut rngs = RngBundle::for_trial(&config.seeds(), trial);
        let partition_seed: u64 = rngs.data.random();
        let partition = match config.partition {
            PartitionSpec::Shards(k) => {
                data::partition_shards(&data.train, config.devices, k, partition_seed)?
            }
            PartitionSpec::Classes(c) => {
                data::partition_by_classes(&data.train, config.devices, c, partition_seed)?
            }
        };
        let channel = ChannelConfig::with_uniform_distances(
            config.antenna_gain,
            config.carrier_freq,
            config.path_loss_exponent,
            config.noise_power,
            config.tx_power,
            config.devices,
            (config.distance_min, config.distance_max),
            &mut rngs.channel,
        )?;
        Ok(TrialState {
            model: ModelParams::zeros(data.train.model_dim()),
            partition,
            channel,
            round: 0,
            gamma: 0.0,
            rngs,
        })
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn weighted_sum<'a>(dim: usize, terms: impl IntoIterator<Item = (f64, &'a [f64])>) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, g) in terms {
        for (o, x) in out.iter_mut().zip(g) {
            *o += w * x;
        }
    }
    out
}

/// Update variance `||S * sum_k rho_k g_{Y_k} - S * sum_i (m_i / M) g_i||^2`.
///
/// With `rho_k = m_i / (S M p_i)` this is the textbook
/// `||sum_{i in S} m_i / (M p_i) g_i - |S| sum_j (m_j / M) g_j||^2`.
pub fn compute_e_var(
    scheduled: &[usize],
    rho: &[f64],
    gradients: &[&[f64]],
    sample_counts: &[usize],
) -> f64 {
    let dim = gradients[0].len();
    let total: usize = sample_counts.iter().sum();
    let s = scheduled.len() as f64;
    let picked = weighted_sum(
        dim,
        scheduled
            .iter()
            .zip(rho)
            .map(|(&d, &r)| (s * r, gradients[d])),
    );
    let global = weighted_sum(
        dim,
        gradients
            .iter()
            .zip(sample_counts)
            .map(|(g, &m)| (s * m as f64 / total as f64, *g)),
    );
    squared_distance(&picked, &global)
}

/// Runs one round and advances `state`.
pub fn run_round(
    state: &mut TrialState,
    config: &ExperimentConfig,
    data: &TrainingData,
) -> Result<RoundMetrics> {
    let round = state.round;
    run_round_inner(state, config, data).map_err(|e| e.in_round(round))
}

fn run_round_inner(
    state: &mut TrialState,
    config: &ExperimentConfig,
    data: &TrainingData,
) -> Result<RoundMetrics> {
    let policy = config.policy();
    let lr = lr_schedule(state.round, config);
    let n = state.partition.n_devices();
    let counts = state.partition.sample_counts();
    let total = state.partition.total_samples() as f64;
    let dim = state.model.dim();
    let w = state.model.as_slice();

    let mut gradients: Vec<Gradient> = Vec::with_capacity(n);
    let mut stats: Vec<GradientStats> = Vec::with_capacity(n);
    let mut batch_loss = 0.0;
    for (device, &m) in counts.iter().enumerate() {
        let batch = model::sample_batch(
            &state.partition,
            device,
            config.batch_size,
            &mut state.rngs.data,
        )?;
        let (loss, g) = batch_loss_and_gradient(w, &data.train, &batch)?;
        batch_loss += m as f64 / total * loss;
        stats.push(gradient_stats(g.as_slice()));
        gradients.push(g);
    }

    let fading = draw_channels(&state.channel, &mut state.rngs.channel)?;
    let h = fading.magnitudes();
    let v_tilde = aircomp::v_tilde(&stats, &counts);

    let outcome = if policy == Policy::DeterministicRandom {
        scheduling::sample_uniform(n, config.num_scheduled, &mut state.rngs.sched)?
    } else {
        let inputs = ScheduleInputs {
            sample_counts: counts.clone(),
            h_magnitudes: h.clone(),
            grad_norms: stats.iter().map(|s| s.norm).collect(),
            v_tilde,
            dim,
            noise_power: config.noise_power,
            tx_power: config.tx_power,
        };
        let p = scheduling::single_probs(&policy, &inputs)?;
        scheduling::sample_without_replacement(&p, config.num_scheduled, &mut state.rngs.sched)?
    };
    let rho = scheduling::policy_weights(&policy, &outcome, &counts);

    let noise_power = match policy {
        Policy::NoiseFree { .. } => 0.0,
        _ => config.noise_power,
    };
    let picked: Vec<&[f64]> = outcome
        .selected
        .iter()
        .map(|&d| gradients[d].as_slice())
        .collect();
    let h_picked: Vec<f64> = outcome.selected.iter().map(|&d| h[d]).collect();
    let agg = aircomp::simulate_aggregation(
        &picked,
        rho.as_slice(),
        &h_picked,
        config.tx_power,
        noise_power,
        &mut state.rngs.noise,
    )?;
    let e_com_analytic = aircomp::analytic_distortion(
        agg.variance,
        rho.as_slice(),
        &h_picked,
        config.tx_power,
        dim,
        noise_power,
    )?;

    let mb_refs: Vec<&[f64]> = gradients.iter().map(Gradient::as_slice).collect();
    let e_var_mb = compute_e_var(&outcome.selected, rho.as_slice(), &mb_refs, &counts);

    let (train_loss, e_var_full) = if config.full_diagnostics {
        let mut full = Vec::with_capacity(n);
        let mut loss = 0.0;
        for (device, &m) in counts.iter().enumerate() {
            let (l, g) = batch_loss_and_gradient(w, &data.train, state.partition.indices(device))?;
            loss += m as f64 / total * l;
            full.push(g);
        }
        let refs: Vec<&[f64]> = full.iter().map(Gradient::as_slice).collect();
        (
            loss,
            Some(compute_e_var(
                &outcome.selected,
                rho.as_slice(),
                &refs,
                &counts,
            )),
        )
    } else {
        (batch_loss, None)
    };

    let step = lr * policy.step_multiplier(outcome.len());
    state.model.descend(step, &agg.estimate);
    if state.model.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::State("model diverged to non-finite values".into()));
    }
    state.gamma += lr;
    let eval = model::evaluate(state.model.as_slice(), &data.test)?;

    let metrics = RoundMetrics {
        round: state.round,
        train_loss,
        test_accuracy: eval.accuracy,
        e_com_analytic,
        e_com_empirical: agg.squared_error(),
        e_var_mb,
        e_var_full,
        a_t: agg.design.a,
        learning_rate: lr,
        gamma_t: state.gamma,
        scheduled: outcome.sorted_ids(),
    };
    state.round += 1;
    Ok(metrics)
}

/// All rounds of one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub metrics: Vec<RoundMetrics>,
    pub final_accuracy: f64,
    /// Best test accuracy over all rounds (best-model selection).
    pub best_accuracy: f64,
    pub best_round: usize,
}

/// Runs `config.rounds` rounds of trial `trial`.
pub fn run_trial(
    config: &ExperimentConfig,
    data: &TrainingData,
    trial: usize,
) -> Result<TrialResult> {
    let mut state = TrialState::init(config, data, trial)?;
    let mut metrics = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        metrics.push(run_round(&mut state, config, data)?);
    }
    let (best_round, best_accuracy) = metrics.iter().map(|m| (m.round, m.test_accuracy)).fold(
        (0, f64::NEG_INFINITY),
        |best, cur| if cur.1 > best.1 { cur } else { best },
    );
    Ok(TrialResult {
        trial,
        final_accuracy: metrics.last().map_or(0.0, |m| m.test_accuracy),
        best_accuracy,
        best_round,
        metrics,
    })
}

/// Mean, sample standard deviation and standard error of a set of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Spread {
            mean,
            std,
            stderr: std / n.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub trials: usize,
    pub rounds: usize,
    pub final_accuracy: Spread,
    pub best_accuracy: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub trials: Vec<TrialResult>,
    pub summary: ExperimentSummary,
}

/// Runs every trial of `config`, `config.parallel_trials` at a time. Results
/// are ordered by trial index whatever the parallelism.
pub fn run_experiment(config: &ExperimentConfig, data: &TrainingData) -> Result<ExperimentResult> {
    config.validate()?;
    for note in learning_rate_advisories(config) {
        log::warn!("learning-rate schedule: {note}");
    }
    let trials: Vec<TrialResult> = if config.parallel_trials > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallel_trials)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..config.trials)
                .into_par_iter()
                .map(|t| run_trial(config, data, t))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..config.trials)
            .map(|t| run_trial(config, data, t))
            .collect::<Result<Vec<_>>>()?
    };
    let finals: Vec<f64> = trials.iter().map(|t| t.final_accuracy).collect();
    let bests: Vec<f64> = trials.iter().map(|t| t.best_accuracy).collect();
    Ok(ExperimentResult {
        summary: ExperimentSummary {
            trials: trials.len(),
            rounds: config.rounds,
            final_accuracy: Spread::of(&finals),
            best_accuracy: Spread::of(&bests),
        },
        trials,
    })
}
