//! Stability certificates for discrete-time linear systems under aperiodic
//! sampling, computed directly from one noisy state-input trajectory.
//!
//! Two certificate engines estimate the maximum sampling interval (MSI):
//! a robust input/output engine ([`io`]) and a switched-systems engine
//! ([`switched`]). Both produce LMI feasibility certificates that are
//! re-verified independently of the conic backend. A set-membership
//! two-step baseline ([`setmem`]), a closed-loop simulator and a
//! schedule falsifier ([`sim`]) cross-validate the certified bounds.

pub mod data;
pub mod lmi;
pub mod mult;
pub mod plant;
pub mod setmem;
pub mod sim;
pub mod solver;
pub mod tol;

pub mod io;
pub mod switched;

mod linalg;

pub use linalg::{mat_pow, mat_two_norm, pinv, spectral_radius, sym_eig_range, sym_min_eig};
pub use plant::{Controller, LinearPlant, SamplingSchedule};
pub use data::{DataMatrices, DataRecord, LiftedDataMatrices};

use thiserror::Error;

/// Errors shared across the engines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("insufficient data for lift h={h} (N={n})")]
    InsufficientData { h: usize, n: usize },
    #[error("singular-value bound unavailable: level-1 consistency SDP infeasible")]
    SingularBoundUnavailable,
    #[error("dimension too large for baseline: {0} vertices exceed cap {1}")]
    VertexCap(u64, u64),
    #[error("data inconsistent with the declared disturbance bound")]
    InconsistentData,
    #[error("ill-conditioned certificate block: condition number {0:.3e}")]
    IllConditioned(f64),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
