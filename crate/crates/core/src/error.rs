use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("innovation covariance is not positive definite at step {step}")]
    SingularInnovation { step: usize },

    #[error("filter diverged (non-finite state) at step {step}")]
    FilterDiverged { step: usize },

    #[error("simulation diverged (non-finite state) at step {step}")]
    SimulationDiverged { step: usize },

    #[error("non-finite gradient rejected at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    /// Training stopped; `checkpoint` holds the last finite parameter vector.
    #[error("training diverged at iteration {iteration}: {reason}")]
    TrainingDiverged {
        iteration: usize,
        reason: String,
        checkpoint: Vec<f64>,
    },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("results directory {0} contains no runs")]
    EmptyCampaign(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
