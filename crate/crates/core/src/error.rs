use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("densify would materialize {requested} values (cap {cap})")]
    SizeCap { requested: usize, cap: usize },

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("scene generation failed: {0}")]
    SceneGeneration(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("NeRF branch uninitialized")]
    NerfUninitialized,

    #[error("training diverged at iteration {iteration}: {source}")]
    Diverged {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than input data or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
