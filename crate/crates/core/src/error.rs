use thiserror::Error;

/// Failure modes shared by every module of the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A site, path or configuration lies outside the region it must live in.
    #[error("domain error: {0}")]
    Domain(String),
    /// Non-finite or out-of-range model parameters.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// An operation was called outside its contract (e.g. a drift step where
    /// a free step was required).
    #[error("contract violation: {0}")]
    Contract(String),
    /// No bracketing pair of infection rates could be found.
    #[error("bracket error: {0}")]
    Bracket(String),
    /// A request exceeds the configured resource limits.
    #[error("resource error: {0}")]
    Resource(String),
}

pub type Result<T> = std::result::Result<T, Error>;
