use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // tensor_core
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("loss must be a scalar, got {0} elements")]
    NotScalar(usize),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    // nn
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    // optim
    #[error("epoch {epoch} out of range for schedule of {horizon} epochs")]
    EpochOutOfRange { epoch: usize, horizon: usize },

    // prune
    #[error("sparsity {0} outside [0, 1)")]
    InvalidSparsity(f64),
    #[error("all saliencies are zero; normalization undefined")]
    ZeroSaliency,
    #[error("element {index} of `{param}` is already pruned")]
    AlreadyPruned { param: String, index: usize },
    #[error("target density {target} exceeds current density {current}")]
    DensityIncrease { target: f64, current: f64 },

    // data
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    // experiment
    #[error("pretraining epochs {pretrain} must be below the total budget {total}")]
    BudgetExceeded { total: usize, pretrain: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u8, found: u8 },
    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),
    #[error("no results to report")]
    EmptyResults,
    #[error("config error: {0}")]
    Config(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
