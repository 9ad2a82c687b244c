use std::path::PathBuf;

/// Errors raised across the registration and synthesis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("precondition failed: {message} (requires at least {required_steps} squaring steps)")]
    Precondition {
        message: String,
        required_steps: u32,
    },

    #[error("non-finite loss at level {level}, iteration {iteration}")]
    NumericalFailure { level: usize, iteration: usize },

    #[error("inversion-recovery fit failed: {0}")]
    FitFailure(String),

    #[error("phantom generation failed: {0}")]
    GenerationFailure(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Failure of one element of a batch, tagged with its position.
    #[error("batch element {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips batch wrappers and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Batch { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerical optimization itself, as opposed to
    /// bad inputs or I/O problems.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NumericalFailure { .. } | Error::FitFailure(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
