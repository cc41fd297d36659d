//! Numeric tolerances used across the crate.
//!
//! All comparisons against solver output go through these constants so the
//! acceptance thresholds live in one place.

/// Relative rank decision for full-column-rank checks: a singular value
/// counts as nonzero when it exceeds `RANK_TOL * sigma_max`.
pub const RANK_TOL: f64 = 1e-10;

/// Tolerance for eigenvalue-based witness certification (falsifier,
/// spectral-radius checks).
pub const EIG_TOL: f64 = 1e-9;

/// Slack allowed when re-verifying a strict LMI certificate: a constraint
/// encoded as `M >= eps*I` passes when `min_eig(M) >= eps - POST_TOL`.
pub const POST_TOL: f64 = 1e-7;

/// Violations above this (after polishing) count as infeasibility.
pub const INFEAS_TOL: f64 = 1e-7;

/// Strict inequalities `M > 0` are encoded as `M >= eps*I` with
/// `eps = STRICT_EPS_REL * scale`, where `scale` is the problem scale
/// (largest absolute entry of the data-dependent constraint blocks).
pub const STRICT_EPS_REL: f64 = 1e-8;

/// Feasibility tolerance for the entry-wise identification LPs.
pub const LP_TOL: f64 = 1e-9;

/// Residual tolerance for data-consistency membership: scale-relative,
/// `RANGE_TOL_REL * (1 + ||R||)`.
pub const RANGE_TOL_REL: f64 = 1e-8;

/// Slack for quadratic-matrix-inequality soundness checks.
pub const QMI_TOL: f64 = 1e-7;

/// Vertex-enumeration cap for the set-membership baseline.
pub const VERTEX_CAP: u64 = 1 << 20;

/// Default exhaustive-search depth for the schedule falsifier.
pub const FALSIFIER_DEPTH: usize = 6;

/// Condition-number cap above which a certificate block inverse is
/// rejected as numerically meaningless.
pub const COND_CAP: f64 = 1e12;

/// Relative margin floor for accepting a synthesized gain during the
/// design sweep. Near the attainable horizon the certified margins decay
/// toward machine precision; below this floor a candidate is treated as
/// not certified. Roughly 1e3 times f64 machine epsilon.
pub const DESIGN_MARGIN_FLOOR: f64 = 2e-13;
