use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension contract violated by an operation's inputs.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A non-shape precondition was violated (invalid range, bad config, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Misuse of a computation graph (non-scalar loss, double backward, ...).
    #[error("graph error: {0}")]
    Graph(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A training run failed to reach its required quality bar.
    #[error("training failed: {0}")]
    TrainingFailed(String),

    /// Malformed or inconsistent serialized data.
    #[error("format error: {0}")]
    Format(String),

    /// Evaluation-protocol violation (seed or pairing mismatch).
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
