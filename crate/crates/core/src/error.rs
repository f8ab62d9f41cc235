use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("simulation diverged at sub-step {substep}")]
    SimulationDiverged { substep: usize },

    #[error("inverse kinematics failed to converge, residual {residual:.3e} m")]
    IkFailed { residual: f64 },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("optimizer diverged: non-finite gradient")]
    OptimizerDiverged,

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("demonstration generation failed: {successes}/{attempts} successful rollouts")]
    DemoGenerationFailed { successes: usize, attempts: usize },

    #[error("insufficient data: need at least 2 seeds, got {0}")]
    InsufficientData(usize),

    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),

    #[error("{}: parse error at line {line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input or configuration rather than
    /// a failure during execution.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Configuration(_) | Error::CheckpointIncompatible(_)
        )
    }
}
