use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: expected 3 tab-separated fields, found {found}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        found: usize,
    },

    #[error("{0}: no triples found")]
    EmptyFile(PathBuf),

    #[error("invalid knowledge graph: {0}")]
    InvalidGraph(String),

    #[error("invalid model configuration: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate score vector: all {0} candidate scores are equal")]
    DegenerateScores(usize),

    #[error("calibration example {index} failed: {source}")]
    Calibration {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint is truncated")]
    CheckpointTruncated,

    #[error("not a checkpoint file (bad magic bytes)")]
    CheckpointMagic,

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
