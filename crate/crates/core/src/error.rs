use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("format error at line {line}: {message}")]
    FormatLine { line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("critic unavailable: {0}")]
    CriticUnavailable(String),

    #[error("could not parse critic response: {0}")]
    Parse(String),

    #[error("degenerate region {bbox:?} after clamping")]
    DegenerateRegion { bbox: [f64; 4] },

    #[error("illegal status transition {from} -> {to} for pair {id}")]
    Transition { id: String, from: String, to: String },

    #[error("iteration {iteration} starved: {accepted} accepted pairs")]
    IterationStarved { iteration: u32, accepted: usize },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("all {0} training jobs failed")]
    AllJobsFailed(usize),

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
