use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, model stages, IO and configuration.
#[derive(Debug)]
pub enum Error {
    /// Two operands (or an operand and an expectation) disagree on shape.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A scalar argument or option is out of its valid range.
    InvalidArgument(String),
    /// A value that must stay finite became NaN or infinite.
    NonFinite(String),
    /// Every position of a softmax slice was masked out.
    FullyMaskedRow { row: usize },
    /// Initialization (e.g. clustering) could not be carried out.
    Init(String),
    /// A pipeline stage failed; carries the stage name.
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
    /// Filesystem failure with the offending path.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A file had the wrong magic, layout or field count.
    Format(String),
    /// Configuration rejected (unknown key, bad value, missing section).
    Config(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the failure is numerical (non-finite values, degenerate softmax).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::FullyMaskedRow { .. } => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::FullyMaskedRow { row } => {
                write!(f, "fully masked attention row (slice {row})")
            }
            Error::Init(msg) => write!(f, "initialization failed: {msg}"),
            Error::Stage { stage, source } => write!(f, "stage {stage}: {source}"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Stage { source, .. } => Some(source),
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
