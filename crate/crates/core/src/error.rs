use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown {kind} `{name}`; valid options: {valid}")]
    UnknownName {
        kind: &'static str,
        name: String,
        valid: String,
    },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("superblock {index}: channel chain broken (expected c_in = {expected}, found {found})")]
    ChannelChain {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("superblock {index}: {reason}")]
    Superblock { index: usize, reason: String },

    #[error("superblock {index}: inadmissible skip placement ({reason})")]
    InadmissibleSkip { index: usize, reason: String },

    #[error("invalid path at superblock {index}: {reason}")]
    InvalidPath { index: usize, reason: String },

    #[error("invalid path: expected {expected} choices, found {found}")]
    PathLength { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("latency table: {0}")]
    LatencyTable(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}: L = {total}, L_P = {task}, L_E = {resource}")]
    NonFiniteLoss {
        step: usize,
        total: f64,
        task: f64,
        resource: f64,
    },

    #[error("dataset container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by malformed or inconsistent user input, as
    /// opposed to runtime aborts.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. } | Error::Io(_))
    }
}
