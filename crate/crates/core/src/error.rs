use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("chance accuracy {0} must lie in [0, 1)")]
    BadChance(f64),
    #[error("accuracy {0} must lie in [0, 1]")]
    BadAccuracy(f64),
    #[error("pooling over an empty patch grid")]
    EmptyGrid,
    #[error("region split column {split_col} leaves an empty region in a grid with {cols} columns")]
    BadSplit { split_col: usize, cols: usize },
    #[error("tile {index} has shape {found:?}, expected {expected:?}")]
    TileShapeMismatch {
        index: usize,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("visual token set is empty")]
    EmptyVisualSet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("zero vector in cosine similarity (row {0})")]
    ZeroVector(usize),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("vector of odd length {0} cannot be split into halves")]
    OddLength(usize),
    #[error("alpha grid is empty")]
    EmptyAlphaGrid,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("unknown scene {scene:?} for category {category}")]
    UnknownScene { category: String, scene: String },
    #[error("problem too large for exhaustive search: {0}")]
    TooLarge(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
