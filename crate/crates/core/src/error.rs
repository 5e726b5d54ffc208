use crate::checkpoint::Checkpoint;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// No bank entry matched the requested origin filter.
    #[error("memory bank has no entries matching {0}")]
    EmptyBank(String),

    /// A loss became non-finite. Carries the last checkpoint taken before
    /// the failing step, when one exists.
    #[error("training diverged at step {step}: {detail}")]
    Divergence {
        step: u64,
        detail: String,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
            Error::EmptyBank(_) => "empty-bank",
            Error::Divergence { .. } => "divergence",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
