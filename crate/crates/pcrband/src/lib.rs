//! Direct solver for compact banded linear systems (cyclic and acyclic,
//! tridiagonal and pentadiagonal) partitioned across distributed-memory
//! ranks.
//!
//! The solve has three layers:
//!
//! 1. [`banded`] - shared-memory generalized parallel cyclic reduction
//!    (PCR) for acyclic compact banded systems of bandwidth 3 or 5, with
//!    pre-factorized reduction coefficients for repeated right-hand sides,
//!    plus the dense Gaussian-elimination oracle in [`dense`].
//! 2. [`partition`] - per-rank block factorization of the partitioned
//!    system: local solves for S, R and y, assembly of the rank's row in
//!    the reduced block-tridiagonal interface system, and back
//!    substitution of interior unknowns.
//! 3. [`reduced`] - distributed block PCR over the interface system, with
//!    detach/reattach stages that handle any rank count, cyclic or not.
//!
//! Ranks communicate only through [`transport`], an in-process
//! message-passing layer with a deterministic lockstep scheduler and full
//! message/byte/stage instrumentation. [`solver`] ties the layers into a
//! whole-system driver. On top sit [`compactfd`], sixth-order compact
//! finite-difference and interpolation operators over pencil-decomposed
//! 3-D fields, and [`tgv`], a compressible Taylor-Green vortex solver that
//! exercises the full stack. [`verify`] hosts the oracle-equivalence and
//! invariant suites behind the CLI.

// Index loops read better than iterator chains in the band arithmetic.
#![allow(clippy::needless_range_loop)]

pub mod banded;
pub mod compactfd;
pub mod dense;
pub mod error;
pub mod partition;
pub mod reduced;
pub mod solver;
pub mod tgv;
pub mod transport;
pub mod verify;

pub use banded::{BandedMatrix, RhsBatch};
pub use dense::DenseMat;
pub use error::{Result, SolverError};
pub use transport::{Communicator, Counters, Frame, Mode, RankId, World};
