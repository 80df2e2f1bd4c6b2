use thiserror::Error;

/// Errors produced by tensor kernels, attention layers and the network.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value is invalid (groups, strides, factors, class counts).
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced or consumed a non-finite value.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Input data violates the expected domain (labels out of range, malformed files).
    #[error("data error: {0}")]
    Data(String),

    /// A caller broke an API contract (non-scalar loss, empty report, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }
}
