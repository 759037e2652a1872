//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid static configuration: sizes, budgets, keep factors.
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid runtime input: out-of-range ids, malformed corpora.
    #[error("input error: {0}")]
    Input(String),
    /// A caller-side API contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Operation invoked in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),
    /// No bucket carries retained tokens at the requested layer, so
    /// similarity ranking has nothing to order.
    #[error("no rankable bucket at layer {layer}")]
    NoRankableBucket { layer: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
