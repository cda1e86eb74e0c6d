use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unknown parameter group `{name}` (valid groups: {})", valid.join(", "))]
    UnknownGroup { name: String, valid: Vec<String> },

    #[error("parameter group `{group}` has wrong shape for `{tensor}`: expected {expected:?}, found {found:?}")]
    GroupShape {
        group: String,
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("gradient supplied for frozen group `{0}`")]
    FrozenGradient(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("no samples eligible for {0}")]
    EmptyEligibleSet(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("failed to load sample `{sample}`: {reason}")]
    SampleLoad { sample: String, reason: String },

    #[error("dataset layout error under {root}: {reason}")]
    Layout { root: PathBuf, reason: String },

    #[error("unknown {kind} `{name}` (registered: {})", registered.join(", "))]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        registered: Vec<String>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
