use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the gamblet pipeline.
#[derive(Debug, Error)]
pub enum GambletError {
    #[error(
        "matrix is not symmetric positive definite (pivot {pivot} at row {row} below {threshold})"
    )]
    NotSpd {
        row: usize,
        pivot: f64,
        threshold: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not symmetric: |m[{i},{j}] - m[{j},{i}]| = {diff}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },

    #[error("eigenvalue iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("probability must lie in (0, 1), got {0}")]
    InvalidProbability(f64),

    #[error("unsupported spatial dimension {0} (expected 1 or 2)")]
    UnsupportedDim(usize),

    #[error("invalid level count q = {0}")]
    InvalidLevels(usize),

    #[error("point set is empty")]
    EmptyPointSet,

    #[error("point {index} = ({x}, {y}) lies outside the unit square")]
    PointOutOfRange { index: usize, x: f64, y: f64 },

    #[error("hierarchy level {level} adds no detail labels")]
    DegenerateLevel { level: usize },

    #[error("graph is disconnected ({components} connected components)")]
    Disconnected { components: usize },

    #[error("index {index} out of range for size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("problem too large for the dense oracle (N = {n}, limit {limit})")]
    TooLarge { n: usize, limit: usize },

    #[error("level {level} outside 0..={q}")]
    BadLevel { level: usize, q: usize },

    #[error("threshold grid is empty")]
    EmptyGrid,

    #[error(
        "could not bracket the regularization parameter (g(alpha) = {reached} < gamma = {gamma})"
    )]
    NoBracket { reached: f64, gamma: f64 },

    #[error("selected level l = 0 carries no energy bound")]
    LevelZero,

    #[error("need at least {needed} levels, have {q}")]
    TooFewLevels { needed: usize, q: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
}

pub type Result<T, E = GambletError> = std::result::Result<T, E>;

impl GambletError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GambletError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        GambletError::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(GambletError::DimensionMismatch { expected, actual })
    }
}
