use crate::numkit::Matrix;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("time {t} outside interpolation range [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    /// Integration produced a non-finite state. `partial` holds every row up
    /// to and including `last_valid`.
    #[error("trajectory diverged after sample {last_valid}")]
    DivergedTrajectory {
        last_valid: usize,
        partial: Box<Matrix>,
    },

    /// Training hit a non-finite loss. The checkpoint carries the parameters
    /// from the last epoch that completed with a finite loss.
    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainingAborted {
        epoch: usize,
        reason: String,
        checkpoint: Box<crate::autoenc::TrainedAutoencoder>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported version {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
