//! Seeded random streams.
//!
//! Every source of randomness in a run is a ChaCha8 stream keyed by one of
//! four named seeds, with the trial index selecting an independent stream.
//! ChaCha output is platform independent, so a seed bundle pins the whole run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type SimRng = ChaCha8Rng;

/// Creates the generator for `seed`, positioned on stream `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The four independent seeds of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedBundle {
    /// Partitioning and mini-batch sampling.
    pub data: u64,
    /// Device placement and fading.
    pub channel: u64,
    /// Device scheduling draws.
    pub sched: u64,
    /// Receiver noise.
    pub noise: u64,
}

impl Default for SeedBundle {
    fn default() -> Self {
        SeedBundle {
            data: 1,
            channel: 2,
            sched: 3,
            noise: 4,
        }
    }
}

/// Per-trial generators derived from a [`SeedBundle`].
#[derive(Debug, Clone)]
pub struct RngBundle {
    pub data: SimRng,
    pub channel: SimRng,
    pub sched: SimRng,
    pub noise: SimRng,
}

impl RngBundle {
    pub fn for_trial(seeds: &SeedBundle, trial: usize) -> Self {
        let stream = trial as u64;
        RngBundle {
            data: stream_rng(seeds.data, stream),
            channel: stream_rng(seeds.channel, stream),
            sched: stream_rng(seeds.sched, stream),
            noise: stream_rng(seeds.noise, stream),
        }
    }
}
