use thiserror::Error;

use crate::automaton::{StateId, Symbol, ValidationReport};

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Model,
}

#[derive(Debug, Error)]
pub enum Error {
    // --- data errors ---------------------------------------------------------
    #[error("line {line}: expected {expected} values, found {found}")]
    RowLength {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("line {line}, column {column}: `{value}` is not a positive integer category")]
    BadCategory {
        line: u64,
        column: usize,
        value: String,
    },
    #[error("line {line}: category {value} in column {column} exceeds declared alphabet size {size}")]
    OutsideAlphabet {
        line: u64,
        column: usize,
        value: u32,
        size: u32,
    },
    #[error("line {line}: covariate value `{value}` is not a number")]
    BadCovariate { line: u64, value: String },
    #[error("column `{0}` not found")]
    UnknownColumn(String),
    #[error("line {line}: frequency `{value}` is not a non-negative integer")]
    BadWeight { line: u64, value: String },
    #[error("malformed directive: {0}")]
    BadDirective(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has no covariate")]
    MissingCovariate,
    #[error("covariate must be {expected}")]
    CovariateKind { expected: &'static str },
    #[error("covariate has a single level; nothing to compare")]
    SingleCovariateLevel,
    #[error("covariate group {0} has no rows")]
    EmptyGroup(String),
    #[error("row {row} has no path in the model")]
    Unroutable { row: usize },
    #[error("dataset alphabets {data:?} do not fit model alphabets {model:?}")]
    AlphabetMismatch { data: Vec<u32>, model: Vec<u32> },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    // --- model errors --------------------------------------------------------
    #[error("invalid model:\n{0}")]
    Invalid(ValidationReport),
    #[error("edge {edge} references unknown state {state}")]
    UnknownState { edge: usize, state: StateId },
    #[error("alphabet sizes must be at least 1 and there must be at least one level")]
    BadAlphabets,
    #[error("operation needs {required} new states, limit is {limit}")]
    SizeGuard { required: String, limit: usize },
    #[error("edge probabilities are not set")]
    ProbabilitiesUnset,
    #[error("edge counts are missing or inconsistent: {0}")]
    Counts(String),
    #[error("states {0:?} do not share a single level")]
    MixedLevels(Vec<StateId>),
    #[error("state set must hold at least two distinct states below the sink, got {0:?}")]
    BadStateSet(Vec<StateId>),
    #[error("state {0} does not exist")]
    NoSuchState(StateId),
    #[error("models have different shapes: {0}")]
    Incompatible(String),
    #[error("second model is not obtainable from the first by merging: {0}")]
    NotNested(String),
    #[error("table has no observations")]
    EmptyTable,
    #[error("penalty weight must be non-negative, got {0}")]
    NegativePenalty(f64),
    #[error("threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("state {state} has out-alphabet of size {size}; logistic edges need binary symbols")]
    NonBinary { state: StateId, size: u32 },
    #[error("state {0} has no routed observations")]
    EmptyState(StateId),
    #[error("symbol {symbol} at level {level} is outside the alphabet")]
    BadSymbol { level: usize, symbol: Symbol },
    #[error("graph does not satisfy the parent condition at node {node}: {detail}")]
    GraphCondition { node: usize, detail: String },
    #[error("model lacks property Q at level {0}")]
    NoPropertyQ(usize),
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            RowLength { .. }
            | BadCategory { .. }
            | OutsideAlphabet { .. }
            | BadCovariate { .. }
            | UnknownColumn(_)
            | BadWeight { .. }
            | BadDirective(_)
            | EmptyDataset
            | MissingCovariate
            | CovariateKind { .. }
            | SingleCovariateLevel
            | EmptyGroup(_)
            | Unroutable { .. }
            | AlphabetMismatch { .. }
            | Csv(_)
            | Io(_) => ErrorKind::Data,
            _ => ErrorKind::Model,
        }
    }
}
