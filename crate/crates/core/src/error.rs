use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Every particle weight at step `t` (0-based) is zero.
    #[error("all particle weights are zero at step {t}")]
    WeightCollapse { t: usize },

    /// A proposal produced a non-finite state.
    #[error("non-finite proposal sample for particle {particle} at step {t}")]
    NonFiniteSample { particle: usize, t: usize },

    /// A density component evaluated to NaN.
    #[error("{component} density returned NaN at step {t}")]
    NanDensity { component: &'static str, t: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix `{0}` is not positive definite")]
    NotPositiveDefinite(&'static str),

    /// Numerical breakdown inside a recursion, tagged with the step index.
    #[error("numerical failure at step {t}: {msg}")]
    Numerical { t: usize, msg: String },

    /// The proposal family has no analytic gradients for this model.
    #[error("no analytic gradients for proposal `{family}` on model `{model}`")]
    UnsupportedPair { family: String, model: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at row {row}, column {column}: {msg}")]
    Parse { row: usize, column: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    /// An error raised while running a named task.
    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// Whether the error comes from bad configuration rather than numerics.
    pub fn is_config(&self) -> bool {
        if let Error::Context { source, .. } = self {
            return source.is_config();
        }
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_) | Error::Io { .. } | Error::UnsupportedPair { .. }
        )
    }
}
