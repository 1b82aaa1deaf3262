use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },
    #[error("unknown label `{label}` at manifest row {row}")]
    UnknownLabel { row: usize, label: String },
    #[error("sequence `{0}` has no neutral frame")]
    MissingNeutral(String),
    #[error("cannot split {subjects} subjects into {folds} folds")]
    TooManyFolds { folds: usize, subjects: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("sample `{sample}` belongs to class {class} which has no threshold")]
    MissingLambda { sample: String, class: usize },
    #[error("brute-force search supports at most {max} samples, got {got}")]
    InstanceTooLarge { max: usize, got: usize },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("training with an empty selection")]
    EmptySelection,
    #[error("zero-size batch in training mode")]
    EmptyBatch,
    #[error("model variant {model} cannot evaluate {data} pairs")]
    VariantMismatch { model: String, data: String },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
