use std::path::PathBuf;

use kiop_tape::TapeError;

#[derive(Debug, thiserror::Error)]
pub enum KiopError {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("depth {depth} out of range 1..={rings}")]
    InvalidDepth { depth: usize, rings: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("cannot map {target} target classes onto {source_classes} source classes")]
    MappingInfeasible { source_classes: usize, target: usize },
    #[error("model {id} changed while frozen (registered {expected}, now {actual})")]
    FrozenViolation { id: String, expected: String, actual: String },
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("contrastive loss needs at least one negative")]
    DegenerateContrast,
    #[error("synthesis diverged in round {round}: {detail}")]
    SynthesisDiverged { round: usize, detail: String },
    #[error("data bank is empty")]
    EmptyBank,
    #[error("snapshot mismatch: {0}")]
    SnapshotMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("cannot ingest {path}: {detail}")]
    Ingest { path: PathBuf, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl KiopError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KiopError::Io { path: path.into(), source }
    }

    /// Whether the CLI should report this as a configuration problem.
    pub fn is_config(&self) -> bool {
        matches!(self, KiopError::Config(_) | KiopError::InvalidPartition(_) | KiopError::MappingInfeasible { .. })
    }
}

pub type Result<T> = std::result::Result<T, KiopError>;
