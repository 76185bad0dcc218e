use thiserror::Error;

/// Failure classes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent input (maps to a configuration failure).
    #[error("invalid input: {0}")]
    Input(String),
    /// Requested dimension or degree outside the supported range.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// A point or geodesic left the chart domain.
    #[error("outside domain: {0}")]
    Domain(String),
    /// An iterative or integration scheme failed to meet its tolerance.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for failures caused by bad input rather than by the numerics.
    pub fn is_input(&self) -> bool {
        matches!(self, Error::Input(_) | Error::Unsupported(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn numerical<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Numerical(msg.into()))
}
