use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("load error in tensor `{tensor}`: {reason}")]
    LoadTensor { tensor: String, reason: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("cache miss: {0}")]
    CacheMiss(String),

    #[error("model mismatch: cache fingerprint {cache} does not match model {model}")]
    Fingerprint { cache: String, model: String },

    #[error("template error: {0}")]
    Template(String),

    #[error("identity error: {0}")]
    Identity(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("tokenization error: {0}")]
    Tokenization(String),

    #[error("parse error at {path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 usage, 3 parse, 4 model/load, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Parse { .. } | Self::Json(_) | Self::Template(_) => 3,
            Self::LoadTensor { .. } | Self::Load(_) | Self::Fingerprint { .. } => 4,
            _ => 1,
        }
    }
}
