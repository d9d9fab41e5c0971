use std::fmt;
use std::path::PathBuf;

use crate::checkpoint::IncompatibilityReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Io,
    Stats,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("keep fraction {0} is outside (0, 1]")]
    InvalidKeepFraction(f64),

    #[error("{what} requires at least one tensor")]
    EmptyInput { what: &'static str },

    #[error("malformed safetensors header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("tensor {key} in {path} overlaps another tensor's byte range")]
    OverlappingRanges { path: PathBuf, key: String },

    #[error("tensor {key} has unsupported dtype {dtype}")]
    UnsupportedDtype { key: String, dtype: String },

    #[error("missing shard file {path}")]
    MissingShard { path: PathBuf },

    #[error("no checkpoint found at {path}")]
    NoCheckpoint { path: PathBuf },

    #[error("checkpoints are incompatible: {0}")]
    Incompatible(IncompatibilityReport),

    #[error("a checkpoint set needs at least one finetuned model")]
    NoFinetunedModels,

    #[error("duplicate tensor key {0}")]
    DuplicateKey(String),

    #[error("tensor {key} arrived out of plan order (expected {expected})")]
    UnexpectedKey { key: String, expected: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error while reading tensor {key}: {source}")]
    StreamRead {
        key: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),

    #[error("unknown merge method {0:?}")]
    UnknownMethod(String),

    #[error("consensus merging needs at least two task vectors, got {0}")]
    ConsensusRequiresTwoTasks(usize),

    #[error("negative Fisher value {value} for {key} (task {task}, flat index {index})")]
    NegativeFisher {
        key: String,
        task: String,
        index: usize,
        value: f32,
    },

    #[error("no {kind} statistics for tensor {key} (task {task})")]
    MissingStats {
        kind: String,
        key: String,
        task: String,
    },

    #[error("Gram matrix for {key} has shape {found:?}, expected [{side}, {side}]")]
    GramShapeMismatch {
        key: String,
        side: usize,
        found: Vec<usize>,
    },

    #[error("{kind} statistics for {key} (task {task}) have shape {found:?}, expected {expected:?}")]
    StatsShapeMismatch {
        kind: String,
        key: String,
        task: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("Gram matrix for {key} (task {task}) is not symmetric")]
    AsymmetricGram { key: String, task: String },

    #[error("mask for {key} (task {task}) holds a value other than 0 or 1")]
    InvalidMaskValue { key: String, task: String },

    #[error("linear solve failed for {key} even after diagonal jitter")]
    SolverFailure { key: String },

    #[error("statistics bundle has kind {found}, expected {expected}")]
    KindMismatch { expected: String, found: String },

    #[error("statistics bundle was computed for a different base model (fingerprint {found}, expected {expected})")]
    FingerprintMismatch { expected: String, found: String },

    #[error("invalid statistics bundle: {0}")]
    InvalidStats(String),

    #[error("finetuned score for task {0} is zero or negative")]
    ZeroFinetunedScore(String),

    #[error("score table: {0}")]
    InvalidScoreTable(String),

    #[error("missing base score for generalization task {0}")]
    MissingBaseScore(String),

    #[error("no generalization tasks to compute forgetting over")]
    EmptyGeneralization,

    #[error("evaluation hook failed for candidate {candidate}: {reason}")]
    HookFailed { candidate: usize, reason: String },

    #[error("all {0} search candidates failed")]
    AllCandidatesFailed(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: impl fmt::Display, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.to_string(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            Io { .. } | StreamRead { .. } | MissingShard { .. } => ErrorCategory::Io,
            NegativeFisher { .. }
            | MissingStats { .. }
            | GramShapeMismatch { .. }
            | StatsShapeMismatch { .. }
            | AsymmetricGram { .. }
            | InvalidMaskValue { .. }
            | SolverFailure { .. }
            | KindMismatch { .. }
            | FingerprintMismatch { .. }
            | InvalidStats(_) => ErrorCategory::Stats,
            _ => ErrorCategory::Validation,
        }
    }
}
