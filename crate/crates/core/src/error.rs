use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("layer {layer} out of range (model has {layers} layers, numbered from 1)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("head {head} out of range (model has {heads} heads per layer)")]
    HeadOutOfRange { head: usize, heads: usize },
    #[error("position {pos} out of range for sequence of length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("malformed archive: {0}")]
    MalformedArchive(String),
    #[error("tensor `{0}` contains a non-finite value")]
    NonFiniteTensor(String),
    #[error("invalid intervention plan: {0}")]
    Plan(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("element `{0}` is absent from the example annotation")]
    MissingElement(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
