use thiserror::Error;

/// Errors raised by schedule evaluation, models, samplers and solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument fell outside the domain where the quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// The quantity is singular at the requested point (e.g. log-SNR at t = 0).
    #[error("singularity: {0}")]
    Singularity(String),

    /// A caller violated a documented precondition (dimensions, ordering, missing data).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a non-finite or otherwise unusable number.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Too few usable points remained to fit a convergence order.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Serialization(err.to_string())
    }
}

pub(crate) fn ensure_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Contract(format!(
            "{what} has length {got}, expected {want}"
        )));
    }
    Ok(())
}

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "{what} has non-finite entry at index {i}"
        )));
    }
    Ok(())
}
