use thiserror::Error;

/// Error taxonomy shared by all modules.
///
/// The CLI maps these onto process exit codes: validation/config errors are
/// usage errors, numeric/domain/state errors are runtime failures, and
/// `InvariantViolation` is reserved for checks that falsify an expected
/// mathematical property (e.g. an empirical distance exceeding its bound).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
