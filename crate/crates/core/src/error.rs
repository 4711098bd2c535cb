use std::path::PathBuf;

/// Unified error type for the engine, the model and the data pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation. Names the
    /// operation and the offending axes so shape bugs are diagnosable from
    /// the message alone.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A structurally valid but semantically unusable argument (zero batch,
    /// non-odd kernel, stride that does not divide, ...).
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// Batch normalization in training mode needs at least two values per
    /// channel to estimate a variance.
    #[error("batch_norm: training mode needs at least 2 values per channel, got {count}")]
    DegenerateBatch { count: usize },

    /// An operation produced NaN or infinity while finite-value guards were
    /// enabled.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    /// Numerical failure outside a single op: divergence, NaN gradients, a
    /// singular system. Carries enough context to locate the culprit.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An I/O failure, always annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents are not what we expect (corrupt
    /// checkpoint, malformed metadata line, bad image dimensions, ...).
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Invalid configuration (unknown key, unparsable value, violated
    /// structural invariant).
    #[error("config: {0}")]
    Config(String),

    /// Scene sampling could not satisfy its constraints.
    #[error("scene generation: {0}")]
    Generation(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
