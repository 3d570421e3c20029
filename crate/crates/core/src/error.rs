use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("degenerate proposal at point ({x}, {y}): zero width or height after clipping")]
    DegenerateProposal { x: f64, y: f64 },

    #[error("empty proposal bag for object {object_id}")]
    EmptyBag { object_id: u64 },

    #[error("negative sampling for image {image_id} needs at least one positive bag")]
    NoPositiveBags { image_id: u64 },

    #[error("schema violation in {record}: {reason}")]
    Schema { record: String, reason: String },

    #[error("annotation {annotation_id} references unknown image_id {image_id}")]
    DanglingImage { annotation_id: u64, image_id: u64 },

    #[error("missing entries for object ids {0:?}")]
    MissingObjects(Vec<u64>),

    #[error("object {object_id} has no point annotation")]
    MissingPoint { object_id: u64 },

    #[error("no scene grid for image {image_id}")]
    MissingScene { image_id: u64 },

    #[error("qc point sampling exhausted its budget for object {object_id}")]
    SamplingExhausted { object_id: u64 },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("label is not one-hot: {0:?}")]
    NotOneHot(Vec<f64>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: {report}")]
    Diverged {
        epoch: usize,
        step: usize,
        report: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad binary file {path}: {reason}")]
    BadBinary { path: PathBuf, reason: String },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
