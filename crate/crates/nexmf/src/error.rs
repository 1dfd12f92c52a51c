use thiserror::Error;

/// Crate-wide error type.
///
/// `InvalidArgument` and `DimensionMismatch` flag caller mistakes and map to
/// usage errors at the CLI boundary; `Numerics` flags an algorithm that ran
/// but could not produce a trustworthy answer (non-finite intermediate,
/// failed convergence guard).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerics(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}

/// Checks that every value in `values` is finite, attributing failures to
/// `what` in the error message.
pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{what}[{i}] = {v}")));
        }
    }
    Ok(())
}
