use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes of payload, found {found}")]
    Length { expected: usize, found: usize },

    #[error("empty matrix: rows={rows}, dims={dims}")]
    EmptyMatrix { rows: usize, dims: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate row {row}: norm is zero")]
    DegenerateRow { row: usize },

    #[error("degenerate class '{label}': adapted embedding has zero norm")]
    DegenerateClass { label: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("label '{0}' already present in vocabulary")]
    Conflict(String),

    #[error("label '{0}' not found in vocabulary")]
    NotFound(String),

    #[error("corruption: {0}")]
    Corruption(String),

    #[error("training diverged at step {step}; last finite step was {last_finite_step:?}")]
    Training {
        step: usize,
        last_finite_step: Option<usize>,
    },

    #[error("resource error: {0}")]
    Resource(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
