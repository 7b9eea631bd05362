use crate::hard_concrete::GateError;
use crate::tensor::TensorError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error("{stage}: {source}")]
    Forward {
        stage: String,
        #[source]
        source: TensorError,
    },
    #[error("gate fabric: {0}")]
    Fabric(String),
    #[error("model: {0}")]
    Model(String),
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("compaction: {0}")]
    Compaction(String),
    #[error("serialization: {0}")]
    Serde(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attaches a stage label (e.g. `block 2 attention`) to tensor errors.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: impl FnOnce() -> String) -> Result<T>;
}

impl<T> StageExt<T> for std::result::Result<T, TensorError> {
    fn stage(self, stage: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Forward {
            stage: stage(),
            source,
        })
    }
}
