use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("{solver} did not converge within {cap} iterations (residual {residual:e})")]
    NumericFailure {
        solver: &'static str,
        cap: usize,
        residual: f64,
    },

    #[error("degenerate support at state {state}: {reason}")]
    DegenerateSupport { state: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn degenerate(state: usize, reason: impl Into<String>) -> Self {
        Error::DegenerateSupport {
            state,
            reason: reason.into(),
        }
    }
}
