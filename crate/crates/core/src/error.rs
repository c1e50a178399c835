use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Channel counts are inconsistent with the group size / channel multiple.
    #[error("group layout error: {0}")]
    Layout(String),

    /// Malformed container, checkpoint, tensor or config file.
    #[error("format error: {0}")]
    Format(String),

    /// Entropy-coded payload ended early or could not be decoded.
    #[error("stream error: {0}")]
    Stream(String),

    /// A metric could not be evaluated (e.g. RD curves without overlap).
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Training produced a NaN or infinity.
    #[error("non-finite value in tensor `{tensor}` (epoch {epoch}, step {step})")]
    NonFinite {
        tensor: String,
        epoch: usize,
        step: usize,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors that stem from bad input data rather than misuse of the API.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Stream(_) | Error::Io(_) | Error::Eval(_) | Error::NonFinite { .. }
        )
    }
}
