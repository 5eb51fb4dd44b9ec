use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("integration blew up at step {step}: {detail}")]
    Blowup { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("digest mismatch: expected {expected}, found {found}")]
    Digest { expected: String, found: String },

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("training diverged at update {step}: {detail}")]
    Diverged {
        step: usize,
        detail: String,
        /// Parameters from the last completed checkpoint before divergence.
        last_good: Box<crate::checkpoint::Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Short machine-readable tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::MissingGradient(_) => "missing_gradient",
            Error::Degenerate(_) => "degenerate",
            Error::Blowup { .. } => "blowup",
            Error::Format(_) => "format",
            Error::Digest { .. } => "digest",
            Error::Version(_) => "version",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }
}
