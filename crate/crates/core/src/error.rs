use std::path::PathBuf;

/// Errors produced anywhere in the library.
///
/// The CLI maps [`Error::Config`] to exit code 2 and [`Error::Numerical`] to
/// exit code 3; everything else is a generic failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violates an operation's precondition (shape mismatch,
    /// out-of-range parameter, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration is inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity appeared during training or simulation.
    #[error("numerical failure in {context} at step {step}: {detail}")]
    Numerical {
        context: String,
        step: usize,
        detail: String,
    },

    /// A binary or JSON file did not have the expected layout.
    #[error("format error in {path:?} at byte offset {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: usize,
        detail: String,
    },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
