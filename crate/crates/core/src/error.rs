use thiserror::Error;

/// Errors raised by the library. The CLI maps these onto exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("prefix slice of row {row} has zero norm at m = {m}")]
    ZeroPrefixNorm { row: usize, m: usize },
    #[error("prefix length {m} out of range for dimension {d}")]
    DimOutOfRange { m: usize, d: usize },
    #[error("row index {row} out of range for {n} rows")]
    RowOutOfRange { row: usize, n: usize },
    #[error("unknown document id(s): {}", .0.join(", "))]
    UnknownDocumentId(Vec<String>),
    #[error("pair references document {0} twice")]
    SelfPair(String),
    #[error("invalid embedding matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid prefix scheme: {0}")]
    InvalidScheme(String),
    #[error("invalid loss batch: {0}")]
    InvalidBatch(String),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("anchor row {0} has no positive")]
    AnchorWithoutPositive(usize),
    #[error("prefix length {0} is odd; complex chunking needs an even prefix")]
    OddPrefix(usize),
    #[error("multi-level loss needs ordinal labels, pair {0} carries a binary target")]
    NonOrdinalLabel(usize),
    #[error("at least two clusters are required")]
    SingleCluster,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero variance")]
    ZeroVariance,
    #[error("only one class present")]
    SingleClass,
    #[error("partitions cover different document sets")]
    MismatchedDocumentSets,
    #[error("relational similarity needs at least 3 seed pairs, got {0}")]
    TooFewSeeds(usize),
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("missing text for document(s): {}", .0.join(", "))]
    MissingText(Vec<String>),
    #[error("invalid cluster tree: {0}")]
    InvalidTree(String),
    /// Malformed input file; the message names the file and location.
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
