use thiserror::Error;

use crate::dynamics::DynamicsKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state variant does not match dynamics model {expected:?}")]
    VariantMismatch { expected: DynamicsKind },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing self-history entry for step {step} (robot {robot})")]
    MissingHistory { robot: usize, step: u64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numeric failures map to a distinct process exit code in the CLI.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::NonFinite(_) | Error::Autodiff(_))
    }
}
