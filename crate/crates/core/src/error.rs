use std::path::PathBuf;

/// Errors surfaced by the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum PamError {
    /// Shapes, dimensions or settings that can never work.
    #[error("configuration error: {0}")]
    Config(String),
    /// A numeric computation produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    /// A record or state violates one of its type invariants.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("schema version mismatch in {path}: file has v{found}, expected v{expected}")]
    Schema {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("checkpoint role mismatch: expected {expected}, found {found}")]
    Role { expected: String, found: String },
    #[error("corrupt data in {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PamError {
    pub fn config(msg: impl Into<String>) -> Self {
        PamError::Config(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        PamError::Invariant(msg.into())
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        PamError::NonFinite {
            context: context.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            PamError::Config(_) | PamError::Role { .. } | PamError::Schema { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, PamError>;
