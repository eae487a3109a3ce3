use std::path::PathBuf;

/// Crate-wide error type. Variants map to CLI exit codes, so keep the set
/// small and stable.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid input: {0}")]
    Input(String),

    /// An experiment configuration failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// A file had the wrong layout, magic, version, or payload length.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// An internal invariant was violated; indicates a bug, not bad input.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) => 2,
            Error::Config(_) => 3,
            Error::Format { .. } => 4,
            Error::Contract(_) => 5,
            Error::Io { .. } | Error::Json { .. } => 6,
        }
    }
}
