use std::path::PathBuf;

/// Everything that can go wrong in the library. Each variant maps onto one of
/// the CLI exit codes through [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("architecture mismatch: {0}")]
    Spec(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("truncated data: {0}")]
    Length(String),
    #[error("inconsistent data: {0}")]
    Consistency(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Training { epoch: usize, batch: usize, detail: String },
    #[error("{stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 = configuration, 2 = data, 3 = numeric/training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Spec(_) | Error::Dimension(_) => 1,
            Error::Format(_)
            | Error::Length(_)
            | Error::Consistency(_)
            | Error::Data(_)
            | Error::Corrupt(_)
            | Error::Io { .. } => 2,
            Error::Numeric(_) | Error::State(_) | Error::Training { .. } => 3,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
