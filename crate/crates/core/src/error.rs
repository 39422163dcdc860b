use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid class id {value} at pixel (row {row}, col {col})")]
    InvalidClass { value: u32, row: usize, col: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no labeled pixels: every pixel is ignore, class frequencies are undefined")]
    NoLabeledPixels,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("registry is missing checkpoint `{0}`")]
    MissingCheckpoint(String),

    #[error("registry: {0}")]
    Registry(String),

    #[error("style swap protocol violation: {0}")]
    Protocol(String),

    #[error("backend: {0}")]
    Backend(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
