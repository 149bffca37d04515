use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// The caller supplied arguments that violate an operation's contract
    /// (shape mismatch, empty dataset, unknown component, ...).
    #[error("rejected input: {0}")]
    RejectedInput(String),
    /// The operation is not allowed in the current state (missing cache,
    /// mask violation, stepping a finished episode, ...).
    #[error("rejected state: {0}")]
    RejectedState(String),
    /// Training aborted by the divergence guard.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::RejectedInput(msg.into()))
}

pub(crate) fn state_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::RejectedState(msg.into()))
}
