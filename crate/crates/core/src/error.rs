use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree. `detail` names the offending axes.
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("layer `{layer}`: {detail}")]
    Layer { layer: String, detail: String },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("kernel index {index} out of range for layer `{layer}` (valid range 0..{count})")]
    KernelOutOfRange {
        layer: String,
        index: usize,
        count: usize,
    },

    /// The selected kernel's feature map is identically zero on the original input.
    #[error("kernel {index} of layer `{layer}` is dead on this input (zero feature map)")]
    DeadKernel { layer: String, index: usize },

    #[error("degenerate normalizer: {0}")]
    DegenerateDenominator(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("invalid network: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("checksum mismatch: manifest records {expected:#010x}, blob has {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("entry `{name}` spans bytes {offset}..{end} but blob is {blob_len} bytes")]
    OffsetOutOfRange {
        name: String,
        offset: u64,
        end: u64,
        blob_len: u64,
    },

    #[error("fixture entry `{0}` does not name a layer of the network")]
    MissingFixtureLayer(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
