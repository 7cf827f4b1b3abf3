use std::path::PathBuf;

use thiserror::Error;

/// Validation failures for an [`ArchConfig`](crate::models::ArchConfig).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("depth must be at least 1")]
    ZeroDepth,
    #[error("width must be at least 1")]
    ZeroWidth,
    #[error("kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("heads must be at least 1")]
    ZeroHeads,
    #[error("width {width} is not divisible by {heads} heads")]
    HeadsDoNotDivide { width: usize, heads: usize },
    #[error("bidirectional LSTM width {0} must be even (half per direction)")]
    OddLstmWidth(usize),
    #[error("classifier must have 37 classes, got {0}")]
    ClassCount(usize),
    #[error("subsampling channels must be at least 1")]
    ZeroChannels,
    #[error("squeeze-excite reduction ratio must be at least 1")]
    ZeroSeRatio,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: shape {shape:?} holds {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },
    #[error("{op}: kernel {kernel} does not fit padded length {padded}")]
    EmptyOutput {
        op: &'static str,
        kernel: usize,
        padded: usize,
    },
    #[error("{op} produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("label {label} at frame {frame} is outside 0..{classes}")]
    Label {
        frame: usize,
        label: usize,
        classes: usize,
    },
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,
    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("invalid normalization statistics: {0}")]
    InvalidStatistics(String),
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("sequence of {len} frames is too short, need at least {min}")]
    SequenceTooShort { len: usize, min: usize },
    #[error("parameter budget {target} is infeasible: the smallest width costs {minimum}")]
    InfeasibleBudget { target: u64, minimum: u64 },
    #[error("receptive field probe inconclusive: {0}")]
    Inconclusive(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at iteration {0}")]
    Diverged(usize),
    #[error("scaling fit: {0}")]
    Fit(String),
    #[error("utterance {id}: {reason}")]
    Utterance { id: String, reason: String },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("audio: {0}")]
    Audio(String),
}

impl Error {
    pub(crate) fn contract(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Contract {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::DataLength { .. } => "shape",
            Error::Contract { .. } => "contract",
            Error::EmptyOutput { .. } => "empty_output",
            Error::NonFinite { .. } => "non_finite",
            Error::Label { .. } => "label",
            Error::BackwardTwice | Error::NonScalarSeed(_) => "backward",
            Error::InvalidStatistics(_) => "statistics",
            Error::Config(_) => "config",
            Error::SequenceTooShort { .. } => "too_short",
            Error::InfeasibleBudget { .. } => "infeasible_budget",
            Error::Inconclusive(_) => "inconclusive",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::Diverged(_) => "diverged",
            Error::Fit(_) => "fit",
            Error::Utterance { .. } => "utterance",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Audio(_) => "audio",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
