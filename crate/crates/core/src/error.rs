use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite feature in image {image_id} part {part}")]
    NonFiniteFeature { image_id: String, part: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("duplicate image_id {0:?}")]
    DuplicateImage(String),

    #[error("empty gallery")]
    EmptyGallery,

    #[error("fully occluded query {0:?}")]
    FullyOccluded(String),

    #[error("empty neighborhood for {0:?}")]
    EmptyNeighborhood(String),

    #[error("missing label: {0}")]
    MissingLabel(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid synthetic spec: {0}")]
    Synth(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
