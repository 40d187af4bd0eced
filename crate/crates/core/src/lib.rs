//! Simulator for over-the-air federated learning with probabilistic,
//! channel- and gradient-importance-aware device scheduling.
//!
//! The crate is organized bottom-up:
//!
//! - [`data`] and [`model`]: datasets, non-IID partitioning and the softmax
//!   regression model trained by the devices.
//! - [`channel`]: path loss and Rayleigh fading.
//! - [`aircomp`]: normalization, transceiver design and analog aggregation.
//! - [`scheduling`]: scheduling probabilities, sampling without replacement
//!   and unbiased aggregation weights.
//! - [`trainer`]: the round loop and per-round diagnostics.
//! - [`oracle`]: brute-force checks used by the test suites.

pub mod aircomp;
pub mod channel;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod scheduling;
pub mod trainer;

pub use aircomp::{AggregationWeights, GlobalStats, GradientStats, TransceiverDesign};
pub use channel::{ChannelConfig, ChannelRealization};
pub use config::{DatasetSpec, ExperimentConfig, PartitionSpec, PolicyKind};
pub use data::{Dataset, Partition};
pub use error::{Error, Result};
pub use model::{Evaluation, Gradient, ModelParams};
pub use rng::{RngBundle, SeedBundle};
pub use scheduling::{Policy, ScheduleInputs, ScheduleOutcome};
pub use trainer::{ExperimentResult, RoundMetrics, TrainingData, TrialResult};
