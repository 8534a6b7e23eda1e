use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The model violates a mathematical precondition (non-causal, covariance not PD).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular spectral matrix at omega = {omega:.6}: {reason}")]
    SingularSpectrum { omega: f64, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("inference failed: {0}")]
    Inference(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by bad user input rather than numerical trouble.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::InvalidInput(_) | Error::Unsupported(_))
    }
}
