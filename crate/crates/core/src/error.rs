use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structure matrix is not symmetric at ({i}, {j}): {a} vs {b}")]
    AsymmetricStructure { i: usize, j: usize, a: f64, b: f64 },
    #[error("structure matrix has nonzero diagonal entry {value} at node {i}")]
    NonzeroDiagonal { i: usize, value: f64 },
    #[error("non-finite entry in {matrix} at ({i}, {j})")]
    NonFiniteEntry { matrix: &'static str, i: usize, j: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("graph is disconnected: node {from} cannot reach node {to}")]
    DisconnectedGraph { from: usize, to: usize },
    #[error("structure matrix is identically zero on {n} nodes")]
    DegenerateStructure { n: usize },
    #[error("parse error in {source_name} at line {line}: {msg}")]
    Parse { source_name: String, line: usize, msg: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("marginal masses differ: {a} vs {b}")]
    InfeasibleMarginals { a: f64, b: f64 },
    #[error("size guard exceeded: {what} = {got} > {limit}")]
    SizeGuardExceeded { what: &'static str, got: usize, limit: usize },
    #[error("reference measure vanishes at index {index} where the compared measure is positive")]
    ZeroReference { index: usize },
    #[error("plan marginal {which}[{index}] is zero; KL penalty is not differentiable there")]
    NonDifferentiablePoint { which: &'static str, index: usize },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    OutOfRange { what: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("insufficient data: need {needed} {what}, found {found}")]
    InsufficientData { what: &'static str, needed: usize, found: usize },
    #[error("insufficient rows for probe: {0}")]
    InsufficientRows(String),
    #[error("embedding covariance has rank {rank} < {requested} requested components")]
    DegenerateCovariance { rank: usize, requested: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("config key `{key}`: {msg}")]
    ConfigKey { key: String, msg: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
