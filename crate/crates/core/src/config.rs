//! Experiment configuration.
//!
//! Defaults reproduce the reference MNIST setup: 30 devices, 10 scheduled per
//! round, alpha = 0.1, P = 1 W, sigma_z^2 = 1e-11 W, batch 10, learning rate
//! `max(0.1 * 0.95^t, 1e-5)`, free-space path loss with G0 = 4.11,
//! f0 = 915 MHz, PL = 3.76, devices uniform in [10, 50] m, two label shards
//! per device and 10 trials.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedBundle;
use crate::scheduling::Policy;

/// Policy names as used in config files and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Proposed,
    #[serde(alias = "importance_aware")]
    Importance,
    #[serde(alias = "channel_aware")]
    Channel,
    Deterministic,
    NoiseFree,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Proposed,
        PolicyKind::Importance,
        PolicyKind::Channel,
        PolicyKind::Deterministic,
        PolicyKind::NoiseFree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Proposed => "proposed",
            PolicyKind::Importance => "importance",
            PolicyKind::Channel => "channel",
            PolicyKind::Deterministic => "deterministic",
            PolicyKind::NoiseFree => "noise_free",
        }
    }

    pub fn with_alpha(self, alpha: f64) -> Policy {
        match self {
            PolicyKind::Proposed => Policy::Proposed { alpha },
            PolicyKind::Importance => Policy::ImportanceAware,
            PolicyKind::Channel => Policy::ChannelAware,
            PolicyKind::Deterministic => Policy::DeterministicRandom,
            PolicyKind::NoiseFree => Policy::NoiseFree { alpha },
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let name = match s {
            "importance_aware" => "importance",
            "channel_aware" => "channel",
            other => other,
        };
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown policy `{s}`")))
    }
}

/// How training data is split across devices: `shards:K` or `classes:C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PartitionSpec {
    Shards(usize),
    Classes(usize),
}

impl fmt::Display for PartitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionSpec::Shards(k) => write!(f, "shards:{k}"),
            PartitionSpec::Classes(c) => write!(f, "classes:{c}"),
        }
    }
}

impl FromStr for PartitionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, count) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("partition `{s}` is not KIND:COUNT")))?;
        let count: usize = count
            .parse()
            .map_err(|_| Error::invalid(format!("partition count `{count}` is not an integer")))?;
        match kind {
            "shards" => Ok(PartitionSpec::Shards(count)),
            "classes" => Ok(PartitionSpec::Classes(count)),
            other => Err(Error::invalid(format!("unknown partition kind `{other}`"))),
        }
    }
}

impl TryFrom<String> for PartitionSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PartitionSpec> for String {
    fn from(p: PartitionSpec) -> String {
        p.to_string()
    }
}

/// Where training data comes from: `mnist:DIR` (standard IDX file names) or
/// `synthetic`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DatasetSpec {
    Mnist(PathBuf),
    Synthetic,
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Mnist(dir) => write!(f, "mnist:{}", dir.display()),
            DatasetSpec::Synthetic => f.write_str("synthetic"),
        }
    }
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            return Ok(DatasetSpec::Synthetic);
        }
        match s.split_once(':') {
            Some(("mnist", dir)) if !dir.is_empty() => Ok(DatasetSpec::Mnist(PathBuf::from(dir))),
            _ => Err(Error::invalid(format!(
                "dataset `{s}` is neither `mnist:PATH` nor `synthetic`"
            ))),
        }
    }
}

impl TryFrom<String> for DatasetSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DatasetSpec> for String {
    fn from(d: DatasetSpec) -> String {
        d.to_string()
    }
}

/// A complete, flat experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub devices: usize,
    pub rounds: usize,
    pub num_scheduled: usize,
    pub policy: PolicyKind,
    pub alpha: f64,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub tx_power: f64,
    pub noise_power: f64,
    pub antenna_gain: f64,
    pub carrier_freq: f64,
    pub path_loss_exponent: f64,
    pub distance_min: f64,
    pub distance_max: f64,
    pub partition: PartitionSpec,
    pub dataset: DatasetSpec,
    pub trials: usize,
    pub seed_data: u64,
    pub seed_channel: u64,
    pub seed_sched: u64,
    pub seed_noise: u64,
    /// Compute exact local gradients every round for `e_var_full` and the
    /// exact training loss. Costs one pass over the training set per round.
    pub full_diagnostics: bool,
    pub parallel_trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seeds = SeedBundle::default();
        ExperimentConfig {
            devices: 30,
            rounds: 100,
            num_scheduled: 10,
            policy: PolicyKind::Proposed,
            alpha: 0.1,
            batch_size: 10,
            lr_initial: 0.1,
            lr_decay: 0.95,
            lr_floor: 1e-5,
            tx_power: 1.0,
            noise_power: 1e-11,
            antenna_gain: 4.11,
            carrier_freq: 915e6,
            path_loss_exponent: 3.76,
            distance_min: 10.0,
            distance_max: 50.0,
            partition: PartitionSpec::Shards(2),
            dataset: DatasetSpec::Mnist(PathBuf::from("data/mnist")),
            trials: 10,
            seed_data: seeds.data,
            seed_channel: seeds.channel,
            seed_sched: seeds.sched,
            seed_noise: seeds.noise,
            full_diagnostics: true,
            parallel_trials: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn policy(&self) -> Policy {
        self.policy.with_alpha(self.alpha)
    }

    pub fn seeds(&self) -> SeedBundle {
        SeedBundle {
            data: self.seed_data,
            channel: self.seed_channel,
            sched: self.seed_sched,
            noise: self.seed_noise,
        }
    }

    pub fn set_seeds(&mut self, seeds: SeedBundle) {
        self.seed_data = seeds.data;
        self.seed_channel = seeds.channel;
        self.seed_sched = seeds.sched;
        self.seed_noise = seeds.noise;
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if self.devices == 0 {
            return fail("devices must be at least 1".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.num_scheduled == 0 || self.num_scheduled > self.devices {
            return fail(format!(
                "num_scheduled = {} must lie in 1..={} (devices)",
                self.num_scheduled, self.devices
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.parallel_trials == 0 {
            return fail("parallel_trials must be at least 1".into());
        }
        let positive = [
            ("alpha", self.alpha),
            ("lr_initial", self.lr_initial),
            ("lr_decay", self.lr_decay),
            ("lr_floor", self.lr_floor),
            ("tx_power", self.tx_power),
            ("antenna_gain", self.antenna_gain),
            ("carrier_freq", self.carrier_freq),
            ("distance_min", self.distance_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.noise_power >= 0.0 && self.noise_power.is_finite()) {
            return fail(format!(
                "noise_power must be nonnegative, got {}",
                self.noise_power
            ));
        }
        if !(self.path_loss_exponent >= 0.0 && self.path_loss_exponent.is_finite()) {
            return fail("path_loss_exponent must be nonnegative".into());
        }
        if !(self.distance_max >= self.distance_min && self.distance_max.is_finite()) {
            return fail(format!(
                "distance range [{}, {}] is empty",
                self.distance_min, self.distance_max
            ));
        }
        match self.partition {
            PartitionSpec::Shards(0) | PartitionSpec::Classes(0) => {
                fail("partition count must be positive".into())
            }
            _ => Ok(()),
        }
    }
}

/// Step size `max(eta0 * decay^t, floor)`.
pub fn lr_schedule(t: usize, config: &ExperimentConfig) -> f64 {
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    (config.lr_initial * config.lr_decay.powi(exp)).max(config.lr_floor)
}

/// Conditions under which the cumulative step size diverges while the sum of
/// squared steps stays finite. Returns one message per violated condition.
pub fn learning_rate_advisories(config: &ExperimentConfig) -> Vec<String> {
    let mut notes = Vec::new();
    if config.lr_floor == 0.0 && config.lr_decay < 1.0 {
        notes.push(format!(
            "sum of step sizes converges to {:.4}; training stalls as rounds grow",
            config.lr_initial / (1.0 - config.lr_decay)
        ));
    }
    if config.lr_floor > 0.0 || config.lr_decay >= 1.0 {
        notes.push(
            "sum of squared step sizes diverges (constant tail); \
             the asymptotic convergence guarantee does not apply"
                .into(),
        );
    }
    notes
}
