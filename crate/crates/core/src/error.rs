use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("step {t} out of range [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("operand has zero variance over the evaluation region")]
    ZeroVariance,

    #[error("evaluation region is empty")]
    EmptyRegion,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown sketch style `{0}` (expected `nuclei` or `membrane`)")]
    UnknownStyle(String),

    #[error("non-finite loss {loss} at training step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("noise prediction failed at step {step}: {source}")]
    Denoise {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("schedule mismatch: checkpoint was trained with `{checkpoint}`, got `{supplied}`")]
    ScheduleMismatch { checkpoint: String, supplied: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("TIFF error in {path}: {message}")]
    Tiff { path: PathBuf, message: String },

    #[error("PNG error: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than a failure while running.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::InvalidConfig(_)
                | Error::ShapeMismatch { .. }
                | Error::StepOutOfRange { .. }
                | Error::UnknownStyle(_)
                | Error::ScheduleMismatch { .. }
                | Error::EmptyInput(_)
                | Error::EmptyRegion
        )
    }

    pub(crate) fn shape(expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
