use std::io;

use thiserror::Error;

/// Errors raised anywhere in the inversion stack.
#[derive(Debug, Error)]
pub enum EkiError {
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A symmetric positive-definite factorisation broke down.
    #[error("factorisation failed: {0}")]
    Factorisation(String),

    /// The LM regularisation search ran out of trial values.
    #[error("no admissible regularisation parameter after {trials} trials (last alpha = {last_alpha:e})")]
    AlphaSearchExhausted { trials: usize, last_alpha: f64 },

    #[error("mesh generation failed: {0}")]
    Mesh(String),

    #[error("forward solve failed: {0}")]
    Forward(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed snapshot: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EkiError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            EkiError::Factorisation(_)
                | EkiError::AlphaSearchExhausted { .. }
                | EkiError::Forward(_)
                | EkiError::Mesh(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, EkiError>;
