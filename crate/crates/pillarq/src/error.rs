use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("output directory {0} is not empty; pass --force to overwrite")]
    OutputExists(PathBuf),

    #[error(transparent)]
    Core(#[from] pillarq_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// 2 for anything the caller can fix in the invocation, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::OutputExists(_) => 2,
            Error::Core(pillarq_core::Error::InvalidConfig(_)) => 2,
            _ => 3,
        }
    }

    /// Stable machine-readable tag printed before the message.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::OutputExists(_) => "E_OUTPUT_EXISTS",
            Error::Io { .. } => "E_IO",
            Error::Format { .. } => "E_FORMAT",
            Error::Core(pillarq_core::Error::InvalidConfig(_)) => "E_CONFIG",
            Error::Core(pillarq_core::Error::NonConvergence { .. }) => "E_NONCONVERGENCE",
            Error::Core(_) => "E_RUNTIME",
        }
    }
}
