use thiserror::Error;

/// Errors raised by the training engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("unsupported kernel shape {0:?}: both kernel dimensions must be odd")]
    UnsupportedKernel(Vec<usize>),
    #[error("invalid probability distribution: {0}")]
    Probability(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("inconsistent action: {0}")]
    Action(String),
    #[error("reward error: {0}")]
    Reward(String),
    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("unknown augmentation op `{0}`")]
    Registry(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("verifier error: {0}")]
    Verifier(String),
    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
