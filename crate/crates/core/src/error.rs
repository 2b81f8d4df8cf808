use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e}, jitter {jitter:e})")]
    NotPositiveDefinite {
        pivot: usize,
        value: f64,
        jitter: f64,
    },

    #[error("integration failed at t = {t_last} (segment {segment:?}): {reason}")]
    Integration {
        t_last: f64,
        segment: Option<usize>,
        reason: String,
    },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("initial-condition sampler exhausted after {attempts} attempts")]
    SamplerExhausted { attempts: usize },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        trace: Vec<f64>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attach a segment index to an integration error.
    pub fn in_segment(self, index: usize) -> Self {
        match self {
            Error::Integration { t_last, reason, .. } => Error::Integration {
                t_last,
                segment: Some(index),
                reason,
            },
            other => other,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
