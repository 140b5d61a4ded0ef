use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error taxonomy for the whole pipeline. The CLI maps each class to a
/// distinct exit code, so keep the classes coarse and stable.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, unknown model kind,
    /// unparseable config files.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or missing input data.
    #[error("data error: {0}")]
    Data(String),

    /// Data error pinned to a specific file location.
    #[error("data error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Shape or dimension mismatch between tensors.
    #[error("shape error: {0}")]
    Shape(String),

    /// Numerical failure: non-finite loss, degenerate statistics, the
    /// masked-softmax empty-row case.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
