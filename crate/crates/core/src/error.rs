use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A quantity left the domain where a formula is defined.
    #[error("domain: {0}")]
    Domain(String),
    /// An iterative numerical routine failed to reach its target.
    #[error("numerical: {0}")]
    Numerical(String),
    /// Malformed textual input.
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
