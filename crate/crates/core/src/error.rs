use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid validity mask: {0}")]
    Validity(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("missing state: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    DataLine { path: PathBuf, line: usize, msg: String },

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
