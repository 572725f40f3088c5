use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("modality {modality} not found in {}", dir.display())]
    MissingModality { modality: String, dir: PathBuf },

    #[error("grid mismatch: {what} has shape {found:?}, expected {expected:?}")]
    GridMismatch {
        what: String,
        expected: [usize; 3],
        found: [usize; 3],
    },

    #[error("malformed NIfTI file {}: {reason}", path.display())]
    Nifti { path: PathBuf, reason: String },

    #[error("empty brain mask")]
    EmptyMask,

    #[error("constant channel {channel}: zero standard deviation over the brain mask")]
    ConstantChannel { channel: usize },

    #[error("unexpected label value {0}")]
    LabelValue(i64),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss {value} in stage {stage} at epoch {epoch}")]
    NonFiniteLoss { stage: usize, epoch: usize, value: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn nifti(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Nifti {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-parseable category, used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MissingModality { .. } | Error::GridMismatch { .. } | Error::Nifti { .. } => {
                "input"
            }
            Error::EmptyMask | Error::ConstantChannel { .. } | Error::LabelValue(_) => "data",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::EmptyDataset | Error::NonFiniteLoss { .. } => "train",
            Error::Checkpoint(_) => "checkpoint",
        }
    }
}
