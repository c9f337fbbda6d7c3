use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state diverged at t={t} (|x|={norm}){}", step.map(|s| format!(" on step {s}")).unwrap_or_default())]
    Diverged { t: f64, norm: f64, step: Option<usize> },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("step size {h} does not divide horizon {horizon} into an integer number of steps")]
    StepSize { horizon: f64, h: f64 },

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("{0} is not positive semidefinite")]
    NotPositiveSemidefinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("replay buffer has no episode with at least {needed} transitions")]
    NoEligibleEpisode { needed: usize },

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("ODE solution became non-finite at t={t}")]
    OdeBlowUp { t: f64 },

    #[error("non-finite {what} at episode {episode}, update {update}")]
    NonFiniteLoss {
        what: &'static str,
        episode: usize,
        update: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
