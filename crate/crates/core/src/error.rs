use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("no mask found for image `{stem}` in {dir}")]
    MissingMask { stem: String, dir: PathBuf },

    #[error("mask `{stem}` is not binary: {detail}")]
    NonBinaryMask { stem: String, detail: String },

    #[error("non-finite loss at step {step} (batch {batch_id}, ids {ids:?}): {detail}")]
    NonFiniteLoss { step: u64, batch_id: usize, ids: Vec<String>, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error on {path}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by the numbers themselves rather than by
    /// bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
