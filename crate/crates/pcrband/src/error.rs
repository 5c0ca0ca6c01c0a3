//! Error types shared across the solver stack.

use std::fmt;

use crate::transport::TransportError;

/// Errors produced by the banded, partition and reduced solvers.
#[derive(Debug, Clone, PartialEq)]
pub enum SolverError {
    /// A pivot fell below the singularity guard during elimination.
    SingularPivot {
        /// Which elimination hit the pivot (e.g. "dense", "pcr stage 2").
        context: String,
        /// Row or block index of the offending pivot.
        index: usize,
    },
    /// Two operands disagree on a dimension.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// A partition layout is inconsistent with the matrix it should split.
    InvalidLayout(String),
    /// A collective step ran without the neighbor data it depends on.
    MissingNeighborData { rank: usize, what: &'static str },
    /// A flow state left the physical regime (negative density or pressure).
    NonPhysicalState { what: &'static str, value: f64 },
    /// Failure in the rank-to-rank transport layer.
    Transport(TransportError),
}

impl fmt::Display for SolverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverError::SingularPivot { context, index } => {
                write!(f, "singular pivot in {context} at index {index}")
            }
            SolverError::DimensionMismatch {
                context,
                expected,
                got,
            } => write!(
                f,
                "dimension mismatch in {context}: expected {expected}, got {got}"
            ),
            SolverError::InvalidLayout(msg) => write!(f, "invalid partition layout: {msg}"),
            SolverError::MissingNeighborData { rank, what } => {
                write!(f, "rank {rank} is missing neighbor data: {what}")
            }
            SolverError::NonPhysicalState { what, value } => {
                write!(f, "non-physical state: {what} = {value}")
            }
            SolverError::Transport(e) => write!(f, "transport failure: {e}"),
        }
    }
}

impl std::error::Error for SolverError {}

impl From<TransportError> for SolverError {
    fn from(e: TransportError) -> Self {
        SolverError::Transport(e)
    }
}

pub type Result<T> = std::result::Result<T, SolverError>;
