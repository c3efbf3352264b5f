//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates a documented constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input value (point, image, sample set) is malformed.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was read but its contents could not be interpreted.
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Inverting the matting model would divide by a vanishing transmittance.
    #[error("ill-conditioned inversion in channel {channel}: transmittance {transmittance:e}")]
    IllConditioned { channel: usize, transmittance: f64 },

    /// A caller broke an operation's contract (e.g. wrong camera kind).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss or gradient term produced a non-finite value.
    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    /// The optimisation diverged; the history recorded up to that step is attached.
    #[error("fit diverged at step {step} (loss {loss:e})")]
    Divergence {
        step: usize,
        loss: f64,
        history: Box<crate::fit::FitHistory>,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Divergence { .. } | Error::NonFinite { .. } | Error::IllConditioned { .. } => 4,
            Error::Input(_) => 2,
            Error::Internal(_) => 1,
        }
    }
}
