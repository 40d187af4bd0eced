use std::path::PathBuf;

/// Errors produced by the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The bytes do not follow the IDX layout.
    #[error("IDX format error: {0}")]
    Format(String),

    /// Two inputs that must agree do not (e.g. image and label counts).
    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    State(String),

    /// A scheduled device has a zero channel magnitude, so no finite
    /// transmit scalar can align it.
    #[error("degenerate channel: device {device} has zero channel magnitude")]
    DegenerateChannel { device: usize },

    /// Every device has a zero scheduling score.
    #[error("degenerate scheduling scores: {0}")]
    DegenerateProbabilities(String),

    #[error("solver did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("enumeration over {n} devices exceeds the cap of {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
