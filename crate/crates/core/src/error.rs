use alloc::string::String;

/// Errors shared across the core modules.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("training hook already installed")]
    HookInstalled,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("trust scores sum to zero")]
    ZeroTrustMass,
    #[error("class ratio cannot be preserved: {0}")]
    RatioUnsatisfiable(String),
    #[error("malformed record: {0}")]
    MalformedRecord(String),
}

pub type Result<T> = core::result::Result<T, Error>;
