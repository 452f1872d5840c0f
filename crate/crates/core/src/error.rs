use thiserror::Error;

pub type Result<T, E = RazorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RazorError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("unknown component or parameter: {0}")]
    Lookup(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl RazorError {
    /// Process exit code for command-line front ends: 1 for input and
    /// configuration problems, 2 for numeric and integrity failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RazorError::NonFinite(_) | RazorError::Integrity(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(RazorError::Dimension(msg.into()))
}
