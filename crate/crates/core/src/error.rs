use thiserror::Error;

/// Shape of a matrix as `(rows, cols)`.
pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum LtnError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("{op}: norm {norm:e} below epsilon, representation collapsed")]
    Collapsed { op: &'static str, norm: f64 },

    #[error("degenerate basis: residual norm {residual:e} at column {column}")]
    DegenerateBasis { column: usize, residual: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("numerical abort at step {step}: {source}")]
    Abort {
        step: usize,
        #[source]
        source: Box<LtnError>,
    },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LtnError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        LtnError::Invalid(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        LtnError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for failures that indicate a numerical problem rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LtnError::NonFinite { .. }
                | LtnError::Collapsed { .. }
                | LtnError::DegenerateBasis { .. }
                | LtnError::Abort { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, LtnError>;
