//! Conic lowering of [`LmiProblem`] onto the Clarabel backend, plus the
//! feasibility pipeline used by all engines: margin maximization followed
//! by an independent eigenvalue re-verification of the returned
//! certificate. Solver output is never trusted directly; a problem counts
//! as feasible only when the re-assembled constraint blocks are definite
//! with relative clearance.

use crate::lmi::{check_dims, eval_constraint, Assignment, LinForm, LmiProblem, Sense, Term, VarKind};
use crate::{linalg, tol, Error, Result};
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Once;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Feasible,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub status: Status,
    pub assignment: Option<Assignment>,
    /// Achieved margin-maximization level (shift common to all weighted
    /// constraints), when margin mode was used.
    pub margin: Option<f64>,
    /// Worst signed violation over all constraints at the returned
    /// assignment: positive means some block failed its sense.
    pub max_violation: f64,
    pub solve_time: std::time::Duration,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Maximize a common definiteness margin over all constraints instead
    /// of solving with fixed strict shifts.
    pub margin_max: bool,
    /// Normalization equality added in margin mode (typically a trace sum)
    /// to keep the margin scale-meaningful.
    pub normalization: Option<(LinForm, f64)>,
    /// After a failed first verification, freeze all scalar variables at
    /// their phase-1 values and re-maximize the margin over the matrix
    /// variables with violation-scaled weights.
    pub two_phase: bool,
    /// Relative definiteness clearance for strict constraints.
    pub accept_rel: f64,
    pub max_iter: Option<u32>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            margin_max: true,
            normalization: None,
            two_phase: false,
            accept_rel: 1e-10,
            max_iter: None,
        }
    }
}

/// Suppresses panic-hook chatter from backend panics (they are caught and
/// mapped to solve failures) while leaving every other panic visible.
fn install_quiet_hook() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(move |info| {
            let loc = info.location().map(|l| l.file().to_string()).unwrap_or_default();
            if loc.contains("clarabel") {
                return;
            }
            prev(info);
        }));
    });
}

/// svec length for a d-dimensional symmetric block.
pub(crate) fn svec_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Scaled upper-triangle (column-major) vectorization matching the PSD
/// triangle cone's coordinates.
pub(crate) fn svec_into(m: &DMatrix<f64>, out: &mut [f64]) {
    let d = m.nrows();
    let s = std::f64::consts::SQRT_2;
    let mut k = 0;
    for j in 0..d {
        for i in 0..=j {
            out[k] = if i == j { m[(i, j)] } else { (m[(i, j)] + m[(j, i)]) * 0.5 * s };
            k += 1;
        }
    }
}

struct ConicData {
    // triplets (row, col, val) of A, with b and cone list
    triplets: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
    n_cols: usize,
    q: Vec<f64>,
}

/// Index of the first slot of each variable, plus the optional margin
/// column appended at the end.
fn lower(
    p: &LmiProblem,
    opts: &SolveOptions,
    pins: Option<&[(usize, f64)]>, // (scalar slot, pinned value)
) -> Result<ConicData> {
    for c in &p.constraints {
        check_dims(c)?;
    }
    let n_slots = p.n_slots();
    let margin_col = if opts.margin_max { Some(n_slots) } else { None };
    let n_cols = n_slots + margin_col.is_some() as usize;

    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut row = 0usize;

    // Zero cone: declared equalities, normalization, pins.
    let mut eq_rows = 0usize;
    let push_eq = |form: &LinForm, rhs: f64,
                       triplets: &mut Vec<(usize, usize, f64)>, b: &mut Vec<f64>, row: &mut usize| {
        for (var, cmat) in &form.mat_terms {
            let base = p.slot_base(*var);
            match p.kind(*var) {
                VarKind::Sym(d) => {
                    let mut k = 0;
                    for j in 0..d {
                        for i in 0..=j {
                            let coeff = if i == j { cmat[(i, i)] } else { cmat[(i, j)] + cmat[(j, i)] };
                            if coeff != 0.0 {
                                triplets.push((*row, base + k, coeff));
                            }
                            k += 1;
                        }
                    }
                }
                VarKind::Rect(r, c) => {
                    for j in 0..c {
                        for i in 0..r {
                            let coeff = cmat[(i, j)];
                            if coeff != 0.0 {
                                triplets.push((*row, base + j * r + i, coeff));
                            }
                        }
                    }
                }
                VarKind::Scalar => {
                    triplets.push((*row, base, cmat[(0, 0)]));
                }
            }
        }
        for (var, c) in &form.scalar_terms {
            triplets.push((*row, p.slot_base(*var), *c));
        }
        b.push(rhs);
        *row += 1;
    };

    for (form, rhs) in &p.equalities {
        push_eq(form, *rhs, &mut triplets, &mut b, &mut row);
        eq_rows += 1;
    }
    if opts.margin_max {
        if let Some((form, rhs)) = &opts.normalization {
            push_eq(form, *rhs, &mut triplets, &mut b, &mut row);
            eq_rows += 1;
        }
    }
    if let Some(pins) = pins {
        for &(slot, val) in pins {
            triplets.push((row, slot, 1.0));
            b.push(val);
            row += 1;
            eq_rows += 1;
        }
    }
    if eq_rows > 0 {
        cones.push(SupportedConeT::ZeroConeT(eq_rows));
    }

    // Nonnegative cone: x_v >= 0 rows (s = x_v).
    if !p.nonneg.is_empty() {
        for v in &p.nonneg {
            triplets.push((row, p.slot_base(*v), -1.0));
            b.push(0.0);
            row += 1;
        }
        cones.push(SupportedConeT::NonnegativeConeT(p.nonneg.len()));
    }

    // PSD triangle blocks.
    let mut scratch = Vec::new();
    for c in &p.constraints {
        let d = c.dim;
        let sl = svec_len(d);
        let negate = matches!(c.sense, Sense::Nsd | Sense::NdStrict(_));
        let sign = if negate { -1.0 } else { 1.0 };
        let eps = match c.sense {
            Sense::PdStrict(e) | Sense::NdStrict(e) => e,
            _ => 0.0,
        };
        scratch.resize(sl, 0.0);

        // constant part: sum of Const terms, minus eps*I, folded pins
        let mut c0 = DMatrix::<f64>::zeros(d, d);
        for t in &c.terms {
            match t {
                Term::Const(m) => c0 += m * sign,
                Term::ScalarMat { var, mat, coeff: cf } => {
                    if let Some(pins) = pins {
                        let slot = p.slot_base(*var);
                        if let Some(&(_, val)) = pins.iter().find(|(s, _)| *s == slot) {
                            c0 += mat * (val * cf * sign);
                        }
                    }
                }
                Term::WeightedGram { vars, t_mat, base, coeff: cf } => {
                    if let Some(pins) = pins {
                        for (i, v) in vars.iter().enumerate() {
                            let slot = p.slot_base(*v);
                            if let Some(&(_, val)) = pins.iter().find(|(s, _)| *s == slot) {
                                let w = val * cf * sign;
                                let col = t_mat.column(i);
                                c0.ger(-w, &col, &col, 1.0);
                                c0 += base * w;
                            }
                        }
                    }
                }
                Term::Congr { .. } => {}
            }
        }
        for i in 0..d {
            c0[(i, i)] -= eps;
        }
        svec_into(&c0, &mut scratch);
        b.extend_from_slice(&scratch); // rows row..row+sl carry svec(c0)

        let is_pinned = |slot: usize| pins.map_or(false, |ps| ps.iter().any(|(s, _)| *s == slot));

        // variable columns
        for t in &c.terms {
            match t {
                Term::Const(_) => {}
                Term::ScalarMat { var, mat, coeff: cf } => {
                    let slot = p.slot_base(*var);
                    if is_pinned(slot) {
                        continue;
                    }
                    let cm = mat * (*cf * sign);
                    svec_into(&cm, &mut scratch);
                    for (k, &v) in scratch.iter().enumerate() {
                        if v != 0.0 {
                            triplets.push((row + k, slot, -v));
                        }
                    }
                }
                Term::WeightedGram { vars, t_mat, base, coeff: cf } => {
                    for (i, v) in vars.iter().enumerate() {
                        let slot = p.slot_base(*v);
                        if is_pinned(slot) {
                            continue;
                        }
                        let col = t_mat.column(i);
                        let mut cm = base * (*cf * sign);
                        cm.ger(-*cf * sign, &col, &col, 1.0);
                        svec_into(&cm, &mut scratch);
                        for (k, &val) in scratch.iter().enumerate() {
                            if val != 0.0 {
                                triplets.push((row + k, slot, -val));
                            }
                        }
                    }
                }
                Term::Congr { var, left, right, transpose, coeff: cf } => {
                    let base = p.slot_base(*var);
                    match p.kind(*var) {
                        VarKind::Sym(dd) => {
                            let mut k = 0;
                            for j in 0..dd {
                                for i in 0..=j {
                                    // d(L V R)/dV_(i,j), symmetric slot
                                    let li = left.column(i);
                                    let rj = right.row(j);
                                    let mut cm = DMatrix::zeros(d, d);
                                    cm.ger(*cf * sign, &li, &rj.transpose(), 0.0);
                                    if i != j {
                                        let lj = left.column(j);
                                        let ri = right.row(i);
                                        cm.ger(*cf * sign, &lj, &ri.transpose(), 1.0);
                                    }
                                    svec_into(&cm, &mut scratch);
                                    for (kk, &val) in scratch.iter().enumerate() {
                                        if val != 0.0 {
                                            triplets.push((row + kk, base + k, -val));
                                        }
                                    }
                                    k += 1;
                                }
                            }
                        }
                        VarKind::Rect(rr, cc) => {
                            for j in 0..cc {
                                for i in 0..rr {
                                    let (ci, rj) = if *transpose { (j, i) } else { (i, j) };
                                    let li = left.column(ci);
                                    let rjv = right.row(rj);
                                    let mut cm = DMatrix::zeros(d, d);
                                    cm.ger(*cf * sign, &li, &rjv.transpose(), 0.0);
                                    svec_into(&cm, &mut scratch);
                                    for (kk, &val) in scratch.iter().enumerate() {
                                        if val != 0.0 {
                                            triplets.push((row + kk, base + j * rr + i, -val));
                                        }
                                    }
                                }
                            }
                        }
                        VarKind::Scalar => {
                            return Err(Error::Invalid(
                                "congruence term over a scalar variable".into(),
                            ))
                        }
                    }
                }
            }
        }

        // margin column: blocks get - t * w * I (after sign normalization)
        if let Some(mc) = margin_col {
            let w = c.margin_weight;
            if w != 0.0 {
                let mut k = 0;
                for j in 0..d {
                    for i in 0..=j {
                        if i == j {
                            triplets.push((row + k, mc, w));
                        }
                        k += 1;
                    }
                }
            }
        }
        row += sl;
        cones.push(SupportedConeT::PSDTriangleConeT(d));
    }

    // objective
    let mut q = vec![0.0; n_cols];
    if let Some(mc) = margin_col {
        q[mc] = -1.0; // maximize the margin
    } else if let Some(form) = &p.objective {
        for (var, cmat) in &form.mat_terms {
            let base = p.slot_base(*var);
            match p.kind(*var) {
                VarKind::Sym(dd) => {
                    let mut k = 0;
                    for j in 0..dd {
                        for i in 0..=j {
                            q[base + k] += if i == j { cmat[(i, i)] } else { cmat[(i, j)] + cmat[(j, i)] };
                            k += 1;
                        }
                    }
                }
                VarKind::Rect(rr, _) => {
                    for j in 0..cmat.ncols() {
                        for i in 0..rr {
                            q[base + j * rr + i] += cmat[(i, j)];
                        }
                    }
                }
                VarKind::Scalar => q[base] += cmat[(0, 0)],
            }
        }
        for (var, c) in &form.scalar_terms {
            q[p.slot_base(*var)] += c;
        }
    }

    Ok(ConicData { triplets, b, cones, n_cols, q })
}

fn to_csc(triplets: &mut Vec<(usize, usize, f64)>, n_rows: usize, n_cols: usize) -> CscMatrix<f64> {
    triplets.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n_cols + 1];
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval = Vec::with_capacity(triplets.len());
    let mut idx = 0usize;
    for col in 0..n_cols {
        colptr[col] = rowval.len();
        while idx < triplets.len() && triplets[idx].1 == col {
            // merge duplicates
            let r = triplets[idx].0;
            let mut v = triplets[idx].2;
            idx += 1;
            while idx < triplets.len() && triplets[idx].1 == col && triplets[idx].0 == r {
                v += triplets[idx].2;
                idx += 1;
            }
            rowval.push(r);
            nzval.push(v);
        }
    }
    colptr[n_cols] = rowval.len();
    CscMatrix::new(n_rows, n_cols, colptr, rowval, nzval)
}

struct RawSolve {
    x: Vec<f64>,
    status: SolverStatus,
}

fn clarabel_solve(data: ConicData, max_iter: Option<u32>) -> Option<RawSolve> {
    install_quiet_hook();
    let ConicData { mut triplets, b, cones, n_cols, q } = data;
    let n_rows = b.len();
    let a = to_csc(&mut triplets, n_rows, n_cols);
    let p = CscMatrix::new(n_cols, n_cols, vec![0; n_cols + 1], vec![], vec![]);
    let mut settings = DefaultSettings::default();
    settings.verbose = false;
    if let Some(it) = max_iter {
        settings.max_iter = it;
    }
    let res = catch_unwind(AssertUnwindSafe(move || {
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).ok()?;
        solver.solve();
        Some(RawSolve { x: solver.solution.x.clone(), status: solver.solution.status })
    }));
    match res {
        Ok(Some(r)) => Some(r),
        _ => None,
    }
}

/// Signed violation of a constraint at an assignment: positive when the
/// block fails its sense, with strict senses measured against their
/// relative clearance.
fn violation(c: &crate::lmi::Constraint, asg: &Assignment, accept_rel: f64) -> f64 {
    let m = eval_constraint(c, asg);
    let (lo, hi) = linalg::sym_eig_range(&m);
    let scale = lo.abs().max(hi.abs()).max(1.0);
    match c.sense {
        Sense::Psd => -lo - tol::POST_TOL * scale,
        Sense::PdStrict(_) => accept_rel * scale - lo,
        Sense::Nsd => hi - tol::POST_TOL * scale,
        Sense::NdStrict(_) => hi + accept_rel * scale,
    }
}

/// Worst violation across all constraints; feasible when <= 0.
pub fn max_violation(p: &LmiProblem, asg: &Assignment, accept_rel: f64) -> f64 {
    p.constraints
        .iter()
        .map(|c| violation(c, asg, accept_rel))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn solve(p: &LmiProblem, opts: &SolveOptions) -> Result<SolveOutcome> {
    let t0 = Instant::now();
    let data = lower(p, opts, None)?;
    let raw = clarabel_solve(data, opts.max_iter);

    let mut warning = None;
    let mut best: Option<(Assignment, f64, Option<f64>)> = None; // (asg, viol, margin)

    if let Some(r) = &raw {
        let asg = Assignment::from_slots(p, &r.x);
        let margin = opts.margin_max.then(|| r.x[p.n_slots()]);
        let viol = max_violation(p, &asg, opts.accept_rel);
        best = Some((asg, viol, margin));
        if matches!(r.status, SolverStatus::NumericalError | SolverStatus::InsufficientProgress) {
            warning = Some(format!("backend status {:?}", r.status));
        }
    } else {
        warning = Some("backend panicked or rejected the problem".into());
    }

    let feasible_now = best.as_ref().map_or(false, |(_, v, _)| *v <= 0.0);

    // Phase 2: freeze scalar weights, re-maximize the margin over matrix
    // variables with violation-scaled weights.
    if !feasible_now && opts.two_phase {
        if let Some((asg1, _, _)) = &best {
            let mut pins = Vec::new();
            for (i, k) in p.vars.iter().enumerate() {
                if matches!(k, VarKind::Scalar) {
                    let id = crate::lmi::VarId(i);
                    pins.push((p.slot_base(id), asg1.scalar(id).max(0.0)));
                }
            }
            let mut p2 = p.clone();
            for c in p2.constraints.iter_mut() {
                let m = eval_constraint(c, asg1);
                c.margin_weight = linalg::mat_two_norm(&m).max(1.0);
            }
            if let Ok(data2) = lower(&p2, opts, Some(&pins)) {
                if let Some(r2) = clarabel_solve(data2, opts.max_iter) {
                    let asg2 = Assignment::from_slots(p, &r2.x);
                    let viol2 = max_violation(p, &asg2, opts.accept_rel);
                    let margin2 = opts.margin_max.then(|| r2.x[p.n_slots()]);
                    let better = best.as_ref().map_or(true, |(_, v, _)| viol2 < *v);
                    if better {
                        best = Some((asg2, viol2, margin2));
                    }
                }
            }
        }
    }

    let outcome = match best {
        Some((asg, viol, margin)) => {
            let status = if viol <= 0.0 { Status::Feasible } else { Status::Infeasible };
            SolveOutcome {
                status,
                assignment: Some(asg),
                margin,
                max_violation: viol,
                solve_time: t0.elapsed(),
                warning,
            }
        }
        None => SolveOutcome {
            status: Status::NumericalFailure,
            assignment: None,
            margin: None,
            max_violation: f64::INFINITY,
            solve_time: t0.elapsed(),
            warning,
        },
    };
    Ok(outcome)
}

/// Margin-maximization solve returning the raw assignment and achieved
/// margin without the feasibility verdict (used by the design sweep,
/// which applies its own acceptance rule on the re-assembled blocks).
pub fn solve_raw(p: &LmiProblem, opts: &SolveOptions) -> Result<Option<(Assignment, f64)>> {
    let data = lower(p, opts, None)?;
    match clarabel_solve(data, opts.max_iter) {
        Some(r) => {
            let asg = Assignment::from_slots(p, &r.x);
            let margin = if opts.margin_max { r.x[p.n_slots()] } else { 0.0 };
            Ok(Some((asg, margin)))
        }
        None => Ok(None),
    }
}

/// Objective-minimization solve (no margin). Returns the assignment and
/// the objective value after verifying every constraint at `POST_TOL`
/// relative slack.
pub fn solve_min(p: &LmiProblem) -> Result<Option<(Assignment, f64)>> {
    let opts = SolveOptions { margin_max: false, ..Default::default() };
    let data = lower(p, &opts, None)?;
    let raw = clarabel_solve(data, None);
    let Some(r) = raw else { return Ok(None) };
    if !matches!(r.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
        return Ok(None);
    }
    let asg = Assignment::from_slots(p, &r.x);
    let slack_ok = p
        .constraints
        .iter()
        .all(|c| {
            let m = eval_constraint(c, &asg);
            let (lo, hi) = linalg::sym_eig_range(&m);
            let scale = lo.abs().max(hi.abs()).max(1.0);
            match c.sense {
                Sense::Psd | Sense::PdStrict(_) => lo >= -tol::POST_TOL * scale,
                Sense::Nsd | Sense::NdStrict(_) => hi <= tol::POST_TOL * scale,
            }
        });
    if !slack_ok {
        return Ok(None);
    }
    let obj = p.objective.as_ref().map_or(0.0, |f| crate::lmi::eval_form(f, &asg));
    Ok(Some((asg, obj)))
}

// ---------------------------------------------------------------------
// Linear programs (set-membership identification).

/// `minimize c'x subject to a_i'x <= b_i, e_j'x == f_j`.
pub struct LpProblem {
    pub n: usize,
    pub c: Vec<f64>,
    pub ineq: Vec<(Vec<f64>, f64)>,
    pub eq: Vec<(Vec<f64>, f64)>,
}

pub struct LpSolution {
    pub x: Vec<f64>,
    pub value: f64,
}

pub fn solve_lp(p: &LpProblem) -> Result<Option<LpSolution>> {
    install_quiet_hook();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut b = Vec::new();
    let mut cones = Vec::new();
    let mut row = 0usize;
    if !p.eq.is_empty() {
        for (a, rhs) in &p.eq {
            for (j, &v) in a.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((row, j, v));
                }
            }
            b.push(*rhs);
            row += 1;
        }
        cones.push(SupportedConeT::ZeroConeT(p.eq.len()));
    }
    if !p.ineq.is_empty() {
        for (a, rhs) in &p.ineq {
            for (j, &v) in a.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((row, j, v));
                }
            }
            b.push(*rhs);
            row += 1;
        }
        cones.push(SupportedConeT::NonnegativeConeT(p.ineq.len()));
    }
    let n_rows = b.len();
    let a = to_csc(&mut triplets, n_rows, p.n);
    let pmat = CscMatrix::new(p.n, p.n, vec![0; p.n + 1], vec![], vec![]);
    let q = p.c.clone();
    let mut settings = DefaultSettings::default();
    settings.verbose = false;
    let res = catch_unwind(AssertUnwindSafe(move || {
        let mut solver = DefaultSolver::new(&pmat, &q, &a, &b, &cones, settings).ok()?;
        solver.solve();
        Some((solver.solution.x.clone(), solver.solution.status, solver.solution.obj_val))
    }));
    match res {
        Ok(Some((x, status, obj))) if matches!(status, SolverStatus::Solved | SolverStatus::AlmostSolved) => {
            Ok(Some(LpSolution { x, value: obj }))
        }
        Ok(Some(_)) => Ok(None),
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmi::{LmiProblem, Sense, Term};
    use nalgebra::dmatrix;

    #[test]
    fn scalar_psd_minimization() {
        // min x s.t. x >= 0 (as a 1x1 PSD block)
        let mut p = LmiProblem::new();
        let x = p.scalar();
        p.add_constraint(
            1,
            vec![Term::ScalarMat { var: x, mat: DMatrix::identity(1, 1), coeff: 1.0 }],
            Sense::Psd,
        );
        p.set_objective(crate::lmi::LinForm::scalar(x));
        let (asg, obj) = solve_min(&p).unwrap().expect("solvable");
        assert!(asg.scalar(x).abs() < 1e-6);
        assert!(obj.abs() < 1e-6);
    }

    #[test]
    fn infeasible_constant_block() {
        // -I >= 0 is infeasible
        let mut p = LmiProblem::new();
        let _x = p.scalar();
        p.add_constraint(
            2,
            vec![Term::Const(-DMatrix::<f64>::identity(2, 2))],
            Sense::Psd,
        );
        let out = solve(&p, &SolveOptions::default()).unwrap();
        assert_ne!(out.status, Status::Feasible);
    }

    #[test]
    fn lyapunov_feasibility_with_margin() {
        // A'PA - P < 0, P > 0 for a stable A
        let a = dmatrix![0.5, 0.2; 0.0, 0.8];
        let mut p = LmiProblem::new();
        let pv = p.sym(2);
        let id = DMatrix::<f64>::identity(2, 2);
        p.add_constraint(
            2,
            vec![Term::Congr { var: pv, left: id.clone(), right: id.clone(), transpose: false, coeff: 1.0 }],
            Sense::PdStrict(0.0),
        );
        p.add_constraint(
            2,
            vec![
                Term::Congr { var: pv, left: a.transpose(), right: a.clone(), transpose: false, coeff: 1.0 },
                Term::Congr { var: pv, left: id.clone(), right: id.clone(), transpose: false, coeff: -1.0 },
            ],
            Sense::NdStrict(0.0),
        );
        let opts = SolveOptions {
            normalization: Some((crate::lmi::LinForm::trace_of(pv, 2), 1.0)),
            ..Default::default()
        };
        let out = solve(&p, &opts).unwrap();
        assert_eq!(out.status, Status::Feasible);
        let pm = out.assignment.unwrap().mat(pv).clone();
        assert!(crate::linalg::sym_min_eig(&pm) > 0.0);
        // margin should be decisively positive for such a stable A
        assert!(out.margin.unwrap() > 1e-4);
    }

    #[test]
    fn lyapunov_infeasibility_for_unstable_a() {
        let a = dmatrix![1.2, 0.0; 0.0, 0.3];
        let mut p = LmiProblem::new();
        let pv = p.sym(2);
        let id = DMatrix::<f64>::identity(2, 2);
        p.add_constraint(
            2,
            vec![Term::Congr { var: pv, left: id.clone(), right: id.clone(), transpose: false, coeff: 1.0 }],
            Sense::PdStrict(0.0),
        );
        p.add_constraint(
            2,
            vec![
                Term::Congr { var: pv, left: a.transpose(), right: a.clone(), transpose: false, coeff: 1.0 },
                Term::Congr { var: pv, left: id.clone(), right: id, transpose: false, coeff: -1.0 },
            ],
            Sense::NdStrict(0.0),
        );
        let opts = SolveOptions {
            normalization: Some((crate::lmi::LinForm::trace_of(pv, 2), 1.0)),
            ..Default::default()
        };
        let out = solve(&p, &opts).unwrap();
        assert_eq!(out.status, Status::Infeasible);
    }

    #[test]
    fn lp_box_bounds() {
        // min x0 s.t. x0 >= -2 (i.e. -x0 <= 2), x0 + x1 == 1
        let p = LpProblem {
            n: 2,
            c: vec![1.0, 0.0],
            ineq: vec![(vec![-1.0, 0.0], 2.0)],
            eq: vec![(vec![1.0, 1.0], 1.0)],
        };
        let sol = solve_lp(&p).unwrap().expect("solvable");
        assert!((sol.x[0] + 2.0).abs() < 1e-7);
        assert!((sol.value + 2.0).abs() < 1e-7);
    }

    #[test]
    fn svec_round_trip_norm() {
        // ||svec(M)||_2 == ||M||_F for symmetric M
        let m = dmatrix![2.0, -1.0, 0.5; -1.0, 3.0, 0.0; 0.5, 0.0, -1.0];
        let mut v = vec![0.0; svec_len(3)];
        svec_into(&m, &mut v);
        let frob = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((frob - sv).abs() < 1e-12);
    }
}
