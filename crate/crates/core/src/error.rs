use thiserror::Error;

/// Error type shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: left is {left}, right is {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("power iteration did not converge after {iters} iterations (last estimate {last_estimate})")]
    Convergence { iters: usize, last_estimate: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("unsupported op in gradient tape: {0}")]
    UnsupportedOp(String),

    #[error("non-finite loss ({value}) at stage {stage}, {phase} iteration {iteration}")]
    NonFiniteLoss {
        stage: usize,
        phase: &'static str,
        iteration: usize,
        value: f64,
    },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.into(),
            right: right.into(),
        }
    }
}
