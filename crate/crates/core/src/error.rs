use std::path::PathBuf;

/// Every failure mode surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown context index {0}")]
    UnknownContext(usize),
    #[error("unknown outcome index {outcome} in context {context}")]
    UnknownOutcome { context: usize, outcome: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("KL divergence undefined: outcome {outcome} of context {context} has mass under the first distribution but none under the second")]
    DivergenceUndefined { context: usize, outcome: usize },
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("grid of {points} points exceeds the {limit} point limit")]
    GridTooLarge { points: u128, limit: u128 },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
