use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by every layer of the crate.
///
/// The variants line up with the HTTP status codes the api crate maps them
/// to, so handlers can forward them without inspecting messages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("edit rejected: {0}")]
    Edit(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("feature extraction failed: {0}")]
    Feature(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },
    #[error("training failed: {0}")]
    Train(String),
    #[error("cross-validation failed: {0}")]
    CrossValidation(String),
    #[error("degenerate regression input: {0}")]
    Degenerate(String),
    #[error("not enough samples: need at least {needed}, got {got}")]
    Sample { needed: usize, got: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
