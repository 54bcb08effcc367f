use thiserror::Error;

/// Error type shared across the crate.
///
/// The split mirrors how callers need to react: `Shape`/`Numeric` are
/// programming or stability failures, `Ingest`/`Io` are bad input files,
/// `Config` is a bad run configuration.
#[derive(Debug, Error)]
pub enum CoreError {
    /// An operation was handed operands whose shapes do not line up.
    /// `detail` names the offending shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Malformed input data (CSV rows, containers, artifacts).
    #[error("{path}: {detail}")]
    Ingest { path: String, detail: String },

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A categorical value outside its frozen vocabulary.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Numeric failure: non-finite values, divergence, failed checks.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// I/O failure annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn ingest(path: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Ingest {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        CoreError::Config(detail.into())
    }

    pub fn encoding(detail: impl Into<String>) -> Self {
        CoreError::Encoding(detail.into())
    }

    pub fn numeric(detail: impl Into<String>) -> Self {
        CoreError::Numeric(detail.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
