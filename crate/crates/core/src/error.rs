use alloc::string::String;

use crate::modality::ModalityKind;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("expected 1 or 3 channels, got {0}")]
    BadChannelCount(usize),
    #[error("batch normalization in train mode needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} at position {position} is outside the vocabulary")]
    OutOfVocabulary { id: u32, position: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("unknown fill policy {0:?}")]
    UnknownPolicy(String),
    #[error("embedding dim {dim} is not divisible by {heads} heads")]
    HeadDivisibility { dim: usize, heads: usize },
    #[error("modality {0} is present but has no valid rows")]
    EmptySegment(ModalityKind),
    #[error("no source modality available to synthesize {0}")]
    NoSourceModality(ModalityKind),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
    #[error("gallery tuple has no RGB sample")]
    MissingRGB,
    #[error("row {0} has no positive pair")]
    NoPositive(usize),
    #[error("need at least two classes")]
    InsufficientClasses,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("evaluation point lies within {0:e} of a ReLU kink")]
    NearKink(f64),
    #[error("ranked list has no relevant item")]
    NoPositives,
    #[error("no queries to score")]
    EmptyQuerySet,
    #[error("gallery is empty")]
    EmptyGallery,
}
