use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TeraError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TeraError {
    /// A caller broke an operation's precondition (shape mismatch, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault: non-finite value at node {node} ({op})")]
    NumericFault { node: usize, op: &'static str },

    #[error("numeric fault at training step {step}: {detail}")]
    StepFault { step: u64, detail: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unsupported sample rate {0} Hz (expected 16000)")]
    UnsupportedRate(u32),

    #[error("utterance too short: {frames} frames < alteration width {width}")]
    UtteranceTooShort { frames: usize, width: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate speaker '{speaker}': {frames} frame(s), need at least 2")]
    DegenerateSpeaker { speaker: String, frames: usize },

    #[error("degenerate batch: no cells in loss scope")]
    DegenerateBatch,

    #[error("data error: {0}")]
    Data(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TeraError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TeraError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl std::fmt::Display, msg: impl Into<String>) -> Self {
        TeraError::Parse { path: path.to_string(), msg: msg.into() }
    }

    /// Validation errors map to exit code 1, runtime faults to 2.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            TeraError::NumericFault { .. } | TeraError::StepFault { .. } | TeraError::Io { .. }
        )
    }
}
