use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("step {step} outside valid range [{lo}, {hi}]")]
    StepOutOfRange { step: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("condition label {0} is not present in the score field")]
    UnknownLabel(usize),

    #[error("score field does not support conditional evaluation")]
    Unconditional,

    #[error("invalid variance: sigma^2 = {sigma2} exceeds 1 - alpha_bar = {limit}")]
    InvalidVariance { sigma2: f64, limit: f64 },

    #[error("integration failed at step {step}: {reason}")]
    Integration { step: f64, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("schedule mismatch: weights were trained with a different noise schedule")]
    ScheduleMismatch,

    #[error("corrupt model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}
