//! Shared fixtures for the criterion benchmarks.

use pofl_core::config::DatasetSpec;
use pofl_core::scheduling::ScheduleInputs;
use pofl_core::{ExperimentConfig, TrainingData};

/// Default experiment on the synthetic task, with light per-round diagnostics.
pub fn synthetic_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Synthetic,
        full_diagnostics: false,
        trials: 1,
        ..ExperimentConfig::default()
    }
}

pub fn synthetic_data() -> TrainingData {
    TrainingData::synthetic(1).expect("synthetic data")
}

/// Scheduling inputs for `n` devices with MNIST-sized gradients.
pub fn schedule_inputs(n: usize) -> ScheduleInputs {
    ScheduleInputs {
        sample_counts: (0..n).map(|i| 1000 + 37 * i).collect(),
        h_magnitudes: (0..n).map(|i| 1e-5 * (1.0 + (i % 7) as f64)).collect(),
        grad_norms: (0..n).map(|i| 0.1 + 0.05 * (i % 5) as f64).collect(),
        v_tilde: 1e-4,
        dim: 7850,
        noise_power: 1e-11,
        tx_power: 1.0,
    }
}
