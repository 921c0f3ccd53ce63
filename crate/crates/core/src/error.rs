use std::io;

use crate::workflow::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config syntax error at line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },

    #[error("invalid workflow: {}", format_violations(.0))]
    InvalidWorkflow(Vec<Violation>),

    #[error("cannot publish into external input stream {0}")]
    PublishToExternal(String),

    #[error("cannot publish into undeclared stream {0}")]
    UndeclaredStream(String),

    #[error("map function {0} has no slate to replace")]
    SlateFromMap(String),

    #[error("no implementation registered for function {0}")]
    UnknownFunction(String),

    #[error("operator {function} failed: {message}")]
    Operator { function: String, message: String },

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error("hash ring has no live nodes")]
    EmptyRing,

    #[error("{path}:{line}: {message}")]
    Source { path: String, line: usize, message: String },

    #[error("wire protocol: {0}")]
    Wire(String),

    #[error("fanout must be at least 1, got {0}")]
    InvalidFanout(usize),

    #[error("stream {0} is not an external input and cannot be throttled")]
    ThrottleInternal(String),

    #[error("simulation did not quiesce within {0} steps")]
    StepLimit(u64),

    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("insufficient replica acks: got {acks}, needed {needed}")]
    Unavailable { acks: usize, needed: usize },

    #[error("corrupt slate record: {0}")]
    Corrupt(String),

    #[error("store io: {0}")]
    Io(#[from] io::Error),
}

impl StoreError {
    /// Whether the caller may retry the operation later.
    pub fn is_retriable(&self) -> bool {
        matches!(self, StoreError::Unavailable { .. } | StoreError::Io(_))
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
