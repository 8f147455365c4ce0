use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension count must be positive")]
    ZeroDims,
    #[error("column {dim} has {got} entries, expected {expected}")]
    ColumnLength {
        dim: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite coordinate at row {row}, dim {dim}")]
    NonFinite { row: usize, dim: usize },
    #[error("duplicate point id {0}")]
    DuplicateId(u64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("degenerate split: no values to take a median of")]
    DegenerateSplit,
    #[error("rank count {0} is not a power of two")]
    RankCount(usize),
    #[error("unsplittable group of ranks {lo}..{hi}: {count} points, all identical at {point:?}")]
    Unsplittable {
        lo: usize,
        hi: usize,
        count: u64,
        point: Vec<f64>,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("duplicate point id {0} in merge; rank regions overlap")]
    MergeDuplicate(u64),
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed data: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
