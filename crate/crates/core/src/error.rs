use std::path::PathBuf;

/// Errors raised across the library. Variants map onto the failure classes
/// the command line reports as one-line machine-readable messages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("sampling error in category {category}: {reason}")]
    Sampling { category: u32, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numeric error in {component}: {reason}")]
    Numeric { component: String, reason: String },

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("parameter '{0}' is frozen")]
    Frozen(String),

    #[error("oracle scope error: {0}")]
    OracleScope(String),

    #[error("context error: {0}")]
    Context(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("image codec error: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(component: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Numeric {
            component: component.into(),
            reason: reason.into(),
        }
    }

    /// Short stable tag used by the CLI for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Sampling { .. } => "sampling",
            Error::Protocol(_) => "protocol",
            Error::Numeric { .. } => "numeric",
            Error::Normalization(_) => "normalization",
            Error::Integrity(_) => "integrity",
            Error::Frozen(_) => "frozen",
            Error::OracleScope(_) => "oracle_scope",
            Error::Context(_) => "context",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
            Error::Image(_) => "image",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
