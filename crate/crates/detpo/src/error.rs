//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("coordinate space mismatch: {0}")]
    CoordinateSpaceMismatch(String),

    #[error("invalid coordinate space: {0}")]
    InvalidCoordinateSpace(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error("annotation {ann_id} references unknown category id {category_id}")]
    UnknownCategory { ann_id: u64, category_id: u64 },

    #[error("annotation {ann_id} references unknown image id {image_id}")]
    UnknownImage { ann_id: u64, image_id: u64 },

    #[error("unknown template id: {0}")]
    UnknownTemplate(String),

    #[error("template {template}: required slot {{{slot}}} is unbound")]
    MissingSlot { template: String, slot: String },

    #[error("could not extract a class definition from model output")]
    EmptyDefinition,

    #[error("image decode failed: {0}")]
    Image(#[from] image::ImageError),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("backend authentication failed: {0}")]
    Authentication(String),

    #[error("request payload too large: {0}")]
    PayloadTooLarge(String),

    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },

    #[error("backend does not support the required capability: {0}")]
    Capability(String),

    #[error("no scripted response for request hash {0}")]
    Unscripted(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
