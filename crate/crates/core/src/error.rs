use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure at step {step}: {message}")]
    NumericalFailure { step: usize, message: String },
    #[error("invalid evaluation pair: {0}")]
    InvalidPair(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
