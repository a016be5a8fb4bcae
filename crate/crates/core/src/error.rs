use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two shapes disagree on a named axis.
    #[error("dimension mismatch in {op}: axis `{axis}` expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A tensor had the wrong rank or an otherwise unusable shape.
    #[error("bad shape in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// The incremental-learning protocol was violated (bad scenario, wrong
    /// labels for the step, missing previous model, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A caller broke an API contract (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed file on disk.
    #[error("format error in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    /// Training diverged.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
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

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
