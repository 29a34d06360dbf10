use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that break its contract
    /// (dimension mismatch, precondition violation, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A model failed its standing assumptions at load time.
    #[error("invalid model: {0}")]
    Model(String),

    /// Offline synthesis failed (infeasible LMIs, Riccati divergence,
    /// empty terminal set, ...).
    #[error("design failure: {0}")]
    Design(String),

    /// The requested design or problem instance has no solution (empty
    /// terminal set, infeasible initial state). A first-class result for
    /// simulation reports, not necessarily a caller bug.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Run configuration problem (missing schedule indices, bad paths, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A validation check failed; carries the witness description.
    #[error("validation failure: {0}")]
    Validation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn design(msg: impl Into<String>) -> Self {
        Error::Design(msg.into())
    }
}
