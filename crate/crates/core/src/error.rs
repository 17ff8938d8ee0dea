use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("{primitive}: shape mismatch: {detail}")]
    Shape {
        primitive: &'static str,
        detail: String,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("refusing to overwrite existing output {0} (pass --force)")]
    Exists(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(primitive: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            primitive,
            detail: detail.into(),
        }
    }
}
