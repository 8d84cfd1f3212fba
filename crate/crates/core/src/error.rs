use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("row {0} has zero degree")]
    ZeroDegree(usize),

    #[error("power iteration did not converge (estimate {estimate}, residual {residual:e})")]
    NoConvergence { estimate: f64, residual: f64 },

    #[error("matrix is singular to working precision (pivot {pivot:e} at column {column})")]
    Singular { column: usize, pivot: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("residue index {found} at line {line} breaks the contiguous 1..L numbering (expected {expected})")]
    NonContiguousIndex { line: usize, expected: usize, found: usize },

    #[error("unknown residue letter {0:?}")]
    UnknownResidue(char),

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("degenerate edge ({0}, {1}): coincident coordinates")]
    DegenerateEdge(usize, usize),

    #[error("wild-type mismatch at position {position}: record says {record}, structure has {structure}")]
    WtMismatch { position: usize, record: char, structure: char },

    #[error("chain growth failed: clash resampling exceeded {retries} retries at residue {residue}")]
    ClashResampleExceeded { residue: usize, retries: usize },

    #[error("attention override row {row} sums to {sum}, expected 1")]
    NonStochasticOverride { row: usize, sum: f64 },

    #[error("every off-diagonal attention entry fell at or below the threshold")]
    AllBelowThreshold,

    #[error("initial residual {0:e} is already at the fixed point")]
    DegenerateResidual(f64),

    #[error("Lipschitz bound violated: ratio {ratio} > bound {bound}")]
    BoundViolated { ratio: f64, bound: f64 },

    #[error("mutation position {position} outside 1..={len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("sequence length {sequence} does not match structure length {structure}")]
    LengthMismatch { sequence: usize, structure: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("dataset is empty or has no targets")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}
