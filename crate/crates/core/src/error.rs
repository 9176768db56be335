use thiserror::Error;

/// Errors raised anywhere in the engine or harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("corrupt file {path}: {msg} (at byte offset {offset})")]
    CorruptFile {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// True for errors a user can fix by editing the experiment config.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::Json(_) => true,
            Error::Round { source, .. } => source.is_config(),
            _ => false,
        }
    }

    /// True for errors caused by missing or malformed datasets.
    pub fn is_data(&self) -> bool {
        match self {
            Error::Data(_) | Error::CorruptFile { .. } => true,
            Error::Round { source, .. } => source.is_data(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
