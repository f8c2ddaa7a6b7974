use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor {name}: non-finite value at index {index}")]
    NonFinite { name: String, index: usize },

    #[error("tensor mismatch: {left} {left_shape:?} vs {right} {right_shape:?}")]
    TensorMismatch {
        left: String,
        left_shape: Vec<usize>,
        right: String,
        right_shape: Vec<usize>,
    },

    #[error("invalid tensor {name}: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {token} at position {position} of {side} sequence {pair} is out of range (vocab {vocab})")]
    TokenOutOfRange {
        pair: usize,
        side: &'static str,
        position: usize,
        token: u32,
        vocab: usize,
    },

    #[error("{side} sequence {pair} has length {len}, limit is {limit}")]
    SequenceTooLong {
        pair: usize,
        side: &'static str,
        len: usize,
        limit: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("tensor name sets differ; only in left: {only_left:?}; only in right: {only_right:?}")]
    NameSetMismatch {
        only_left: Vec<String>,
        only_right: Vec<String>,
    },

    #[error("unknown tensor {0}")]
    UnknownTensor(String),

    #[error("unknown domain kind {0:?}")]
    UnknownDomainKind(String),

    #[error("invalid domain spec: {0}")]
    InvalidDomain(String),

    #[error("split sizes infeasible: test {test_n} + dev {dev_n} must be < corpus size {size}")]
    InfeasibleSplit {
        test_n: usize,
        dev_n: usize,
        size: usize,
    },

    #[error("line counts {source_lines} != {target_lines}")]
    LineCountMismatch {
        source_lines: usize,
        target_lines: usize,
    },

    #[error("client {client}: {source}")]
    Client {
        client: String,
        #[source]
        source: Box<Error>,
    },

    #[error("client {client}, tensor {tensor}: {reason}")]
    Aggregation {
        client: String,
        tensor: String,
        reason: String,
    },

    #[error("duplicate client id {0}")]
    DuplicateClient(String),

    #[error("round {round} is not below total rounds {total}")]
    RoundLimit { round: usize, total: usize },

    #[error("no previous round")]
    NoPreviousRound,

    #[error("invalid pull policy: {0}")]
    InvalidPolicy(String),

    #[error("empty group {0}")]
    EmptyGroup(String),

    #[error("empty selection history: need at least {needed} rounds, got {got}")]
    NotEnoughRounds { needed: usize, got: usize },

    #[error("metric input: {0}")]
    Metric(String),

    #[error("invalid experiment config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_client(self, client: &str) -> Self {
        Error::Client {
            client: client.to_string(),
            source: Box::new(self),
        }
    }
}
