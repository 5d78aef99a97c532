use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("constraint violation: {0}")]
    Constraint(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("autodiff error: {0}")]
    Tape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that originate in floating point work rather than in
    /// the inputs (used by the CLI to pick an exit code).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Training(_))
    }
}
