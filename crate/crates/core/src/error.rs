use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

/// Failures raised by the core. Each variant names the class of problem so
/// that front ends can map it onto exit codes or HTTP statuses.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("data error at position {position}: {message}")]
    DataAt { position: usize, message: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("context length exceeded: {requested} > {limit}")]
    ContextLength { requested: usize, limit: usize },
    #[error("id {id} out of range for vocabulary of size {size}")]
    Range { id: u32, size: usize },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported language: {0}")]
    UnsupportedLanguage(String),
    #[error("upstream failure in stage {stage}: {message}")]
    Upstream {
        stage: &'static str,
        message: String,
    },
    #[error("ablation run {value} failed: {source}")]
    Ablation {
        value: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
