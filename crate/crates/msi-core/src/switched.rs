//! Switched-systems engine. Sampling intervals become switching modes
//! of a lifted system whose matrices are only known through the data;
//! a recursive singular-value ladder bounds the lifted disturbance, and
//! mode-dependent Lyapunov LMIs certify stability over the mode grid.

use crate::data::{DataRecord, LiftedDataMatrices};
use crate::io::Precond;
use crate::lmi::{LinForm, LmiProblem, Sense, Term, VarId};
use crate::mult::{MultKind, MultiplierClass, MultiplierWeights, SystemMultiplier};
use crate::plant::{Controller, LinearPlant};
use crate::solver::{self, SolveOptions, Status};
use crate::{linalg, tol, Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------
// Lifted parametrization (recursive disturbance bounds)

/// One lifted level: data arrangement, effective disturbance injection,
/// multiplier class, and the level's bounds.
#[derive(Debug, Clone)]
pub struct LiftedLevel {
    pub h: usize,
    pub n_h: usize,
    pub d_bar_h: f64,
    pub sigma_h: f64,
    /// whether the singular-value SDP itself succeeded at this level
    pub sdp_ok: bool,
    pub(crate) lifted: LiftedDataMatrices,
    pub(crate) bd_eff: DMatrix<f64>,
    pub(crate) class: MultiplierClass,
}

/// Output of the recursive bound computation: per-level multiplier
/// classes ready for the stability grid.
#[derive(Debug, Clone)]
pub struct LiftedParametrization {
    pub d_bar: f64,
    pub kind: MultKind,
    pub levels: Vec<LiftedLevel>,
    sigma_max_bd: f64,
}

/// Serializable summary for reuse across level sweeps (the recursion
/// never needs to restart from level 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlgoState {
    pub d_bar: f64,
    pub kind: MultKind,
    pub sigma: Vec<f64>,
    pub d_bar_h: Vec<f64>,
    pub sdp_ok: Vec<bool>,
}

impl LiftedParametrization {
    pub fn h_bar(&self) -> usize {
        self.levels.len()
    }

    pub fn state(&self) -> AlgoState {
        AlgoState {
            d_bar: self.d_bar,
            kind: self.kind,
            sigma: self.levels.iter().map(|l| l.sigma_h).collect(),
            d_bar_h: self.levels.iter().map(|l| l.d_bar_h).collect(),
            sdp_ok: self.levels.iter().map(|l| l.sdp_ok).collect(),
        }
    }

    /// Extends the recursion to a higher level using the stored bounds.
    pub fn extend_to(&mut self, rec: &DataRecord, bd: &DMatrix<f64>, h_bar: usize) -> Result<()> {
        extend_levels(self, rec, bd, h_bar)
    }
}

/// Minimizes the squared singular bound subject to the level's QMI
/// relaxation. `None` when the SDP has no acceptable solution.
fn level_sigma_sdp(level_data: &LiftedDataMatrices, bd_eff: &DMatrix<f64>, class: &MultiplierClass) -> Option<f64> {
    let n = level_data.xh.nrows();
    let hm = level_data.uh.nrows();
    let dim = 2 * n + hm;
    let sm = SystemMultiplier::new(level_data.clone(), bd_eff.clone(), class.clone()).ok()?;

    let mut prob = LmiProblem::new();
    let s2 = prob.scalar_nonneg();
    let mut bound = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        bound[(i, i)] = -1.0;
    }
    let mut s2_mat = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        s2_mat[(n + hm + i, n + hm + i)] = 1.0;
    }
    let mut terms = vec![
        Term::Const(bound),
        Term::ScalarMat { var: s2, mat: s2_mat, coeff: 1.0 },
    ];
    match class {
        MultiplierClass::Diagonal { .. } => {
            let (t_mat, base) = sm.gram_parts().ok()?;
            let vars: Vec<VarId> = (0..t_mat.ncols()).map(|_| prob.scalar_nonneg()).collect();
            terms.push(Term::WeightedGram { vars, t_mat, base, coeff: -1.0 });
        }
        MultiplierClass::Quadratic { .. } => {
            let p1 = sm.instantiate(&MultiplierWeights::Quadratic(1.0)).ok()?;
            let tau = prob.scalar_nonneg();
            terms.push(Term::ScalarMat { var: tau, mat: p1, coeff: -1.0 });
        }
    }
    prob.add_constraint(dim, terms, Sense::Psd);
    prob.set_objective(LinForm::scalar(s2));
    match solver::solve_min(&prob) {
        Ok(Some((_, obj))) => Some(obj.max(0.0)),
        _ => None,
    }
}

fn extend_levels(
    lift: &mut LiftedParametrization,
    rec: &DataRecord,
    bd: &DMatrix<f64>,
    h_bar: usize,
) -> Result<()> {
    let n = rec.state_dim();
    let n_steps = rec.n_steps();
    if h_bar < 1 || h_bar > n_steps {
        return Err(Error::InsufficientData { h: h_bar, n: n_steps });
    }
    let start = lift.levels.len() + 1;
    for h in start..=h_bar {
        let lifted = LiftedDataMatrices::build(rec, h)?;
        let n_h = lifted.xh.ncols();
        let bd_eff = if h == 1 { bd.clone() } else { DMatrix::identity(n, n) };
        let d_bar_h = if h == 1 {
            lift.d_bar
        } else {
            let sig_sum: f64 = lift.levels[..h - 1].iter().map(|l| l.sigma_h).sum();
            (1.0 + sig_sum) * lift.sigma_max_bd * lift.d_bar
        };
        let class = MultiplierClass::for_kind(lift.kind, d_bar_h, n_h, bd_eff.ncols())?;
        let sdp = level_sigma_sdp(&lifted, &bd_eff, &class);
        let fallback = if h == 1 {
            None
        } else {
            Some(lift.levels[0].sigma_h * lift.levels[h - 2].sigma_h)
        };
        let (sigma_h, sdp_ok) = match (sdp, fallback) {
            (Some(s2), Some(fb)) => (s2.sqrt().min(fb), true),
            (Some(s2), None) => (s2.sqrt(), true),
            (None, Some(fb)) => (fb, false),
            (None, None) => return Err(Error::SingularBoundUnavailable),
        };
        lift.levels.push(LiftedLevel { h, n_h, d_bar_h, sigma_h, sdp_ok, lifted, bd_eff, class });
    }
    Ok(())
}

/// Recursive computation of the lifted disturbance bounds and multiplier
/// classes: per level, the singular bound is the smaller of the SDP value
/// and the product fallback from level 1, and the next level's
/// disturbance bound follows from the accumulated ladder.
pub fn run_algorithm1(
    rec: &DataRecord,
    bd: &DMatrix<f64>,
    d_bar: f64,
    h_bar: usize,
    kind: MultKind,
) -> Result<LiftedParametrization> {
    if bd.nrows() != rec.state_dim() {
        return Err(Error::Dimension("disturbance matrix rows must match the state".into()));
    }
    let sigma_max_bd = linalg::mat_two_norm(bd);
    let mut lift = LiftedParametrization { d_bar, kind, levels: Vec::new(), sigma_max_bd };
    extend_levels(&mut lift, rec, bd, h_bar)?;
    Ok(lift)
}

/// Rebuilds a parametrization from a stored summary, skipping the SDPs
/// for the levels the state already covers.
pub fn resume_algorithm1(
    rec: &DataRecord,
    bd: &DMatrix<f64>,
    state: &AlgoState,
    h_bar: usize,
) -> Result<LiftedParametrization> {
    let n = rec.state_dim();
    let mut lift = LiftedParametrization {
        d_bar: state.d_bar,
        kind: state.kind,
        levels: Vec::new(),
        sigma_max_bd: linalg::mat_two_norm(bd),
    };
    for (i, ((&sigma_h, &d_bar_h), &sdp_ok)) in state
        .sigma
        .iter()
        .zip(&state.d_bar_h)
        .zip(&state.sdp_ok)
        .enumerate()
        .take(h_bar)
    {
        let h = i + 1;
        let lifted = LiftedDataMatrices::build(rec, h)?;
        let n_h = lifted.xh.ncols();
        let bd_eff = if h == 1 { bd.clone() } else { DMatrix::identity(n, n) };
        let class = MultiplierClass::for_kind(state.kind, d_bar_h, n_h, bd_eff.ncols())?;
        lift.levels.push(LiftedLevel { h, n_h, d_bar_h, sigma_h, sdp_ok, lifted, bd_eff, class });
    }
    extend_levels(&mut lift, rec, bd, h_bar)?;
    Ok(lift)
}

// ---------------------------------------------------------------------
// Certificates

/// Mode-dependent Lyapunov certificate over the level grid (stored in
/// the preconditioned coordinates recorded by `sx`/`su`).
#[derive(Debug, Clone)]
pub struct SwitchedCertificate {
    pub h_bar: usize,
    /// per-level S^h, all symmetric positive definite
    pub s: Vec<DMatrix<f64>>,
    /// per-level slack G^h; design mode stores the one common G everywhere
    pub g: Vec<DMatrix<f64>>,
    /// design mode: F with K = F G^-1 (scaled coordinates)
    pub f: Option<DMatrix<f64>>,
    /// multiplier weights per grid pair, h-major order
    pub weights: Vec<MultiplierWeights>,
    pub sx: nalgebra::DVector<f64>,
    pub su: nalgebra::DVector<f64>,
    /// smallest relative margin over all verified blocks
    pub margin: f64,
}

// ---------------------------------------------------------------------
// Shared grid assembly

fn embed(d: usize, off: usize, len: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(d, len);
    for i in 0..len {
        e[(off + i, i)] = 1.0;
    }
    e
}

/// Scales a lifted arrangement into the preconditioned coordinates.
fn scale_lifted(pre: &Precond, lifted: &LiftedDataMatrices) -> LiftedDataMatrices {
    let n = lifted.xh.nrows();
    let m = pre.su.len();
    let mut xh = lifted.xh.clone();
    let mut xhp = lifted.xhp.clone();
    let mut uh = lifted.uh.clone();
    for i in 0..n {
        for j in 0..xh.ncols() {
            xh[(i, j)] /= pre.sx[i];
            xhp[(i, j)] /= pre.sx[i];
        }
    }
    for i in 0..uh.nrows() {
        for j in 0..uh.ncols() {
            uh[(i, j)] /= pre.su[i % m];
        }
    }
    LiftedDataMatrices { h: lifted.h, xh, xhp, uh }
}

/// Per-level pieces of the grid LMI in scaled coordinates.
struct LevelCtx {
    h: usize,
    dim: usize,
    /// gram columns of the multiplier border, padded into the block
    t_pad: DMatrix<f64>,
    base_pad: DMatrix<f64>,
    /// quadratic kind: the unit-ray system multiplier, padded
    ray_pad: Option<DMatrix<f64>>,
    n_weights: usize,
    sm: SystemMultiplier,
}

fn level_ctx(pre: &Precond, level: &LiftedLevel, n: usize, m: usize) -> Result<LevelCtx> {
    let h = level.h;
    let dim = 3 * n + h * m;
    let lifted_z = scale_lifted(pre, &level.lifted);
    let bd_eff_z = pre.scale_bd(&level.bd_eff);
    let sm = SystemMultiplier::new(lifted_z, bd_eff_z, level.class.clone())?;
    let pad = embed(dim, n, 2 * n + h * m);
    let (t_pad, base_pad, ray_pad) = match &level.class {
        MultiplierClass::Diagonal { .. } => {
            let (t_mat, base) = sm.gram_parts()?;
            (&pad * t_mat, &pad * base * pad.transpose(), None)
        }
        MultiplierClass::Quadratic { .. } => {
            let p1 = sm.instantiate(&MultiplierWeights::Quadratic(1.0))?;
            (DMatrix::zeros(dim, 0), DMatrix::zeros(dim, dim), Some(&pad * p1 * pad.transpose()))
        }
    };
    Ok(LevelCtx { h, dim, t_pad, base_pad, ray_pad, n_weights: level.class.decision_count(), sm })
}

/// Adds the multiplier variables for one grid pair and pushes the
/// `-P~` term; returns the variable handles.
fn push_multiplier_term(prob: &mut LmiProblem, ctx: &LevelCtx, terms: &mut Vec<Term>) -> Vec<VarId> {
    match &ctx.ray_pad {
        Some(ray) => {
            let tau = prob.scalar_nonneg();
            terms.push(Term::ScalarMat { var: tau, mat: ray.clone(), coeff: -1.0 });
            vec![tau]
        }
        None => {
            let vars: Vec<VarId> = (0..ctx.n_weights).map(|_| prob.scalar_nonneg()).collect();
            terms.push(Term::WeightedGram {
                vars: vars.clone(),
                t_mat: ctx.t_pad.clone(),
                base: ctx.base_pad.clone(),
                coeff: -1.0,
            });
            vars
        }
    }
}

fn weights_from(asg: &crate::lmi::Assignment, vars: &[VarId], kind: &MultiplierClass) -> MultiplierWeights {
    match kind {
        MultiplierClass::Diagonal { .. } => {
            MultiplierWeights::Diagonal(vars.iter().map(|&v| asg.scalar(v).max(0.0)).collect())
        }
        MultiplierClass::Quadratic { .. } => MultiplierWeights::Quadratic(asg.scalar(vars[0]).max(0.0)),
    }
}

/// Exact value of one grid block at a candidate certificate.
fn grid_block_value(
    ctx: &LevelCtx,
    s_h: &DMatrix<f64>,
    s_j: &DMatrix<f64>,
    g_h: &DMatrix<f64>,
    row3: &DMatrix<f64>,
    weights: &MultiplierWeights,
) -> Result<DMatrix<f64>> {
    let n = s_h.nrows();
    let hm = ctx.dim - 3 * n;
    let mut mm = DMatrix::<f64>::zeros(ctx.dim, ctx.dim);
    let w = g_h + g_h.transpose() - s_h;
    mm.view_mut((0, 0), (n, n)).copy_from(&w);
    mm.view_mut((n, 0), (n, n)).copy_from(g_h);
    mm.view_mut((0, n), (n, n)).copy_from(&g_h.transpose());
    mm.view_mut((2 * n, 0), (hm, n)).copy_from(row3);
    mm.view_mut((0, 2 * n), (n, hm)).copy_from(&row3.transpose());
    mm.view_mut((2 * n + hm, 2 * n + hm), (n, n)).copy_from(s_j);
    let p_ab = ctx.sm.instantiate(weights)?;
    let pad_dim = 2 * n + hm;
    for i in 0..pad_dim {
        for j in 0..pad_dim {
            mm[(n + i, n + j)] -= p_ab[(i, j)];
        }
    }
    Ok(mm)
}

/// Relative positive-definiteness margin, `min_eig / max(1, ||M||)`.
fn rel_margin(m: &DMatrix<f64>) -> f64 {
    linalg::sym_min_eig(m) / linalg::mat_two_norm(m).max(1.0)
}

// ---------------------------------------------------------------------
// Analysis (given gain)

/// Stability certificate for a given gain over all intervals up to the
/// parametrization's level: mode-dependent Lyapunov grid with one
/// multiplier instance per pair. `None` when the margin-maximized
/// candidate fails verification.
pub fn analyze_with_lift(
    rec: &DataRecord,
    lift: &LiftedParametrization,
    ctrl: &Controller,
    h_bar: usize,
) -> Result<Option<SwitchedCertificate>> {
    if h_bar < 1 || h_bar > lift.h_bar() {
        return Err(Error::Invalid("h_bar exceeds the computed parametrization".into()));
    }
    let data = crate::data::DataMatrices::build(rec);
    let n = rec.state_dim();
    let m = rec.input_dim();
    if ctrl.k.nrows() != m || ctrl.k.ncols() != n {
        return Err(Error::Dimension("gain dimensions do not match the data".into()));
    }
    let pre = Precond::from_data(&data);
    let kz = pre.scale_gain(&ctrl.k);

    let mut prob = LmiProblem::new();
    let s: Vec<VarId> = (0..h_bar).map(|_| prob.sym(n)).collect();
    let g: Vec<VarId> = (0..h_bar).map(|_| prob.rect(n, n)).collect();
    let id = DMatrix::<f64>::identity(n, n);
    for i in 0..h_bar {
        prob.add_constraint(
            n,
            vec![Term::Congr { var: s[i], left: id.clone(), right: id.clone(), transpose: false, coeff: 1.0 }],
            Sense::PdStrict(0.0),
        );
        prob.add_constraint(
            n,
            vec![
                Term::Congr { var: g[i], left: id.clone(), right: id.clone(), transpose: false, coeff: 1.0 },
                Term::Congr { var: g[i], left: id.clone(), right: id.clone(), transpose: true, coeff: 1.0 },
                Term::Congr { var: s[i], left: id.clone(), right: id.clone(), transpose: false, coeff: -1.0 },
            ],
            Sense::PdStrict(0.0),
        );
    }

    let mut ctxs = Vec::with_capacity(h_bar);
    for level in &lift.levels[..h_bar] {
        ctxs.push(level_ctx(&pre, level, n, m)?);
    }
    let mut grid_vars: Vec<Vec<VarId>> = Vec::with_capacity(h_bar * h_bar);
    for (hi, ctx) in ctxs.iter().enumerate() {
        let d = ctx.dim;
        let hm = ctx.h * m;
        let e1 = embed(d, 0, n);
        let e2 = embed(d, n, n);
        let e4 = embed(d, 2 * n + hm, n);
        // stacked gain acting on G^h
        let mut kstk = DMatrix::zeros(hm, n);
        for q in 0..ctx.h {
            kstk.view_mut((q * m, 0), (m, n)).copy_from(&kz);
        }
        let e3k = embed(d, 2 * n, hm) * &kstk;
        for j in 0..h_bar {
            let mut terms = vec![
                Term::Congr { var: g[hi], left: e1.clone(), right: e1.transpose(), transpose: false, coeff: 1.0 },
                Term::Congr { var: g[hi], left: e1.clone(), right: e1.transpose(), transpose: true, coeff: 1.0 },
                Term::Congr { var: s[hi], left: e1.clone(), right: e1.transpose(), transpose: false, coeff: -1.0 },
                Term::Congr { var: g[hi], left: e2.clone(), right: e1.transpose(), transpose: false, coeff: 1.0 },
                Term::Congr { var: g[hi], left: e1.clone(), right: e2.transpose(), transpose: true, coeff: 1.0 },
                Term::Congr { var: g[hi], left: e3k.clone(), right: e1.transpose(), transpose: false, coeff: 1.0 },
                Term::Congr { var: g[hi], left: e1.clone(), right: e3k.transpose(), transpose: true, coeff: 1.0 },
                Term::Congr { var: s[j], left: e4.clone(), right: e4.transpose(), transpose: false, coeff: 1.0 },
            ];
            let vars = push_multiplier_term(&mut prob, ctx, &mut terms);
            grid_vars.push(vars);
            prob.add_constraint(d, terms, Sense::PdStrict(0.0));
        }
    }

    let mut norm = LinForm::trace_of(s[0], n);
    for &sv in &s[1..] {
        norm = norm.plus_trace(sv, n);
    }
    let opts = SolveOptions {
        normalization: Some((norm, 1.0)),
        two_phase: true,
        ..Default::default()
    };
    let out = solver::solve(&prob, &opts)?;
    if out.status != Status::Feasible {
        return Ok(None);
    }
    let asg = out.assignment.expect("feasible outcome carries an assignment");
    let s_v: Vec<DMatrix<f64>> = s.iter().map(|&v| asg.mat(v).clone()).collect();
    let g_v: Vec<DMatrix<f64>> = g.iter().map(|&v| asg.mat(v).clone()).collect();
    let weights: Vec<MultiplierWeights> = grid_vars
        .iter()
        .zip((0..h_bar).flat_map(|hi| std::iter::repeat(hi).take(h_bar)))
        .map(|(vars, hi)| weights_from(&asg, vars, &lift.levels[hi].class))
        .collect();
    let margin = certificate_margin(&ctxs, &s_v, &g_v, &kz, None, &weights)?;
    Ok(Some(SwitchedCertificate {
        h_bar,
        s: s_v,
        g: g_v,
        f: None,
        weights,
        sx: pre.sx,
        su: pre.su,
        margin,
    }))
}

/// Smallest relative margin over every certificate block, exactly
/// re-assembled. Negative when any block fails.
fn certificate_margin(
    ctxs: &[LevelCtx],
    s: &[DMatrix<f64>],
    g: &[DMatrix<f64>],
    kz: &DMatrix<f64>,
    f: Option<&DMatrix<f64>>,
    weights: &[MultiplierWeights],
) -> Result<f64> {
    let h_bar = ctxs.len();
    let n = s[0].nrows();
    let m = kz.nrows();
    let mut worst = f64::INFINITY;
    for (hi, ctx) in ctxs.iter().enumerate() {
        worst = worst.min(rel_margin(&s[hi]));
        let w = &g[hi] + g[hi].transpose() - &s[hi];
        worst = worst.min(rel_margin(&w));
        let hm = ctx.h * m;
        // row 3 of the grid block: stacked K G in analysis, stacked F in design
        let mut row3 = DMatrix::zeros(hm, n);
        for q in 0..ctx.h {
            match f {
                Some(fv) => row3.view_mut((q * m, 0), (m, n)).copy_from(fv),
                None => row3.view_mut((q * m, 0), (m, n)).copy_from(&(kz * &g[hi])),
            }
        }
        for j in 0..h_bar {
            let wts = &weights[hi * h_bar + j];
            let blk = grid_block_value(ctx, &s[hi], &s[j], &g[hi], &row3, wts)?;
            worst = worst.min(rel_margin(&blk));
        }
    }
    Ok(worst)
}

/// Runs the recursion, then the grid analysis.
pub fn analyze(
    rec: &DataRecord,
    bd: &DMatrix<f64>,
    d_bar: f64,
    ctrl: &Controller,
    h_bar: usize,
    kind: MultKind,
) -> Result<Option<SwitchedCertificate>> {
    let lift = run_algorithm1(rec, bd, d_bar, h_bar, kind)?;
    analyze_with_lift(rec, &lift, ctrl, h_bar)
}

/// Verifies a stored certificate against the data by exact assembly
/// before falling back to a fresh solve; design certificates satisfy the
/// analysis grid identically (stacked F equals stacked K G).
pub fn analyze_with_certificate(
    rec: &DataRecord,
    lift: &LiftedParametrization,
    ctrl: &Controller,
    h_bar: usize,
    hint: &SwitchedCertificate,
) -> Result<Option<SwitchedCertificate>> {
    if hint.h_bar == h_bar && hint.s.len() == h_bar {
        let n = rec.state_dim();
        let m = rec.input_dim();
        let pre = Precond { sx: hint.sx.clone(), su: hint.su.clone() };
        let kz = pre.scale_gain(&ctrl.k);
        let mut ctxs = Vec::with_capacity(h_bar);
        for level in &lift.levels[..h_bar] {
            ctxs.push(level_ctx(&pre, level, n, m)?);
        }
        let margin =
            certificate_margin(&ctxs, &hint.s, &hint.g, &kz, hint.f.as_ref(), &hint.weights)?;
        if margin > tol::DESIGN_MARGIN_FLOOR {
            let mut cert = hint.clone();
            cert.margin = margin;
            return Ok(Some(cert));
        }
    }
    analyze_with_lift(rec, lift, ctrl, h_bar)
}

// ---------------------------------------------------------------------
// Design (common slack variable)

/// Simultaneous gain and certificate synthesis: one common G across all
/// levels makes the grid linear in (G, F) with K = F G^-1.
pub fn design(
    rec: &DataRecord,
    bd: &DMatrix<f64>,
    d_bar: f64,
    h_bar: usize,
    kind: MultKind,
) -> Result<Option<(Controller, SwitchedCertificate)>> {
    let lift = run_algorithm1(rec, bd, d_bar, h_bar, kind)?;
    design_with_lift(rec, &lift, h_bar)
}

pub fn design_with_lift(
    rec: &DataRecord,
    lift: &LiftedParametrization,
    h_bar: usize,
) -> Result<Option<(Controller, SwitchedCertificate)>> {
    if h_bar < 1 || h_bar > lift.h_bar() {
        return Err(Error::Invalid("h_bar exceeds the computed parametrization".into()));
    }
    let data = crate::data::DataMatrices::build(rec);
    let n = rec.state_dim();
    let m = rec.input_dim();
    let pre = Precond::from_data(&data);

    let mut prob = LmiProblem::new();
    let s: Vec<VarId> = (0..h_bar).map(|_| prob.sym(n)).collect();
    let g = prob.rect(n, n);
    let f = prob.rect(m, n);
    let id = DMatrix::<f64>::identity(n, n);
    for i in 0..h_bar {
        prob.add_constraint(
            n,
            vec![Term::Congr { var: s[i], left: id.clone(), right: id.clone(), transpose: false, coeff: 1.0 }],
            Sense::PdStrict(0.0),
        );
        prob.add_constraint(
            n,
            vec![
                Term::Congr { var: g, left: id.clone(), right: id.clone(), transpose: false, coeff: 1.0 },
                Term::Congr { var: g, left: id.clone(), right: id.clone(), transpose: true, coeff: 1.0 },
                Term::Congr { var: s[i], left: id.clone(), right: id.clone(), transpose: false, coeff: -1.0 },
            ],
            Sense::PdStrict(0.0),
        );
    }

    let mut ctxs = Vec::with_capacity(h_bar);
    for level in &lift.levels[..h_bar] {
        ctxs.push(level_ctx(&pre, level, n, m)?);
    }
    let mut grid_vars: Vec<Vec<VarId>> = Vec::with_capacity(h_bar * h_bar);
    for (hi, ctx) in ctxs.iter().enumerate() {
        let d = ctx.dim;
        let hm = ctx.h * m;
        let e1 = embed(d, 0, n);
        let e2 = embed(d, n, n);
        let e4 = embed(d, 2 * n + hm, n);
        for j in 0..h_bar {
            let mut terms = vec![
                Term::Congr { var: g, left: e1.clone(), right: e1.transpose(), transpose: false, coeff: 1.0 },
                Term::Congr { var: g, left: e1.clone(), right: e1.transpose(), transpose: true, coeff: 1.0 },
                Term::Congr { var: s[hi], left: e1.clone(), right: e1.transpose(), transpose: false, coeff: -1.0 },
                Term::Congr { var: g, left: e2.clone(), right: e1.transpose(), transpose: false, coeff: 1.0 },
                Term::Congr { var: g, left: e1.clone(), right: e2.transpose(), transpose: true, coeff: 1.0 },
                Term::Congr { var: s[j], left: e4.clone(), right: e4.transpose(), transpose: false, coeff: 1.0 },
            ];
            // stacked F rows, with mirrors
            for q in 0..ctx.h {
                let e3q = embed(d, 2 * n + q * m, m);
                terms.push(Term::Congr { var: f, left: e3q.clone(), right: e1.transpose(), transpose: false, coeff: 1.0 });
                terms.push(Term::Congr { var: f, left: e1.clone(), right: e3q.transpose(), transpose: true, coeff: 1.0 });
            }
            let vars = push_multiplier_term(&mut prob, ctx, &mut terms);
            grid_vars.push(vars);
            prob.add_constraint(d, terms, Sense::PdStrict(0.0));
        }
    }

    let mut norm = LinForm::trace_of(s[0], n);
    for &sv in &s[1..] {
        norm = norm.plus_trace(sv, n);
    }
    let opts = SolveOptions {
        normalization: Some((norm, 1.0)),
        two_phase: true,
        ..Default::default()
    };
    let out = solver::solve(&prob, &opts)?;
    if out.status != Status::Feasible {
        return Ok(None);
    }
    let asg = out.assignment.expect("feasible outcome carries an assignment");
    let g_v = asg.mat(g).clone();
    let f_v = asg.mat(f).clone();
    let cond = linalg::condition_number(&g_v);
    if cond > tol::COND_CAP {
        return Err(Error::IllConditioned(cond));
    }
    let g_inv = g_v.clone().try_inverse().ok_or(Error::IllConditioned(f64::INFINITY))?;
    let kz = &f_v * g_inv;
    let k = pre.unscale_gain(&kz);
    let s_v: Vec<DMatrix<f64>> = s.iter().map(|&v| asg.mat(v).clone()).collect();
    let weights: Vec<MultiplierWeights> = grid_vars
        .iter()
        .zip((0..h_bar).flat_map(|hi| std::iter::repeat(hi).take(h_bar)))
        .map(|(vars, hi)| weights_from(&asg, vars, &lift.levels[hi].class))
        .collect();
    let g_list = vec![g_v; h_bar];
    let margin = certificate_margin(&ctxs, &s_v, &g_list, &kz, Some(&f_v), &weights)?;
    let cert = SwitchedCertificate {
        h_bar,
        s: s_v,
        g: g_list,
        f: Some(f_v),
        weights,
        sx: pre.sx,
        su: pre.su,
        margin,
    };
    Ok(Some((Controller::new(k), cert)))
}

// ---------------------------------------------------------------------
// Lemma-form building blocks and the model-based baseline

/// Schur form of one grid condition: block-diag of the slack-congruence
/// part and S^j, quadratic in the lifted pair. The middle inverse must
/// be numerically meaningful.
pub fn build_mhj(
    g_h: &DMatrix<f64>,
    s_h: &DMatrix<f64>,
    s_j: &DMatrix<f64>,
    k: &DMatrix<f64>,
    h: usize,
) -> Result<DMatrix<f64>> {
    let n = g_h.nrows();
    let m = k.nrows();
    let w = g_h + g_h.transpose() - s_h;
    if linalg::sym_min_eig(&w) <= 0.0 {
        return Err(Error::Invalid("slack term must be positive definite".into()));
    }
    let cond = linalg::condition_number(&w);
    if cond > tol::COND_CAP {
        return Err(Error::IllConditioned(cond));
    }
    let w_inv = w.clone().try_inverse().ok_or(Error::IllConditioned(f64::INFINITY))?;
    let inner = g_h * w_inv * g_h.transpose();
    let hm = h * m;
    let mut stk = DMatrix::zeros(n + hm, n);
    stk.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    for q in 0..h {
        stk.view_mut((n + q * m, 0), (m, n)).copy_from(k);
    }
    let dim = 2 * n + hm;
    let mut out = DMatrix::zeros(dim, dim);
    out.view_mut((0, 0), (n + hm, n + hm))
        .copy_from(&(-(&stk * inner * stk.transpose())));
    out.view_mut((n + hm, n + hm), (n, n)).copy_from(s_j);
    Ok(out)
}

/// Evaluates the Schur form at an explicit lifted pair, yielding the
/// mode-transition Lyapunov decrement `S^j - Phi G W^-1 G' Phi'`.
pub fn mhj_quadratic(
    mhj: &DMatrix<f64>,
    a_h: &DMatrix<f64>,
    b_h: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = a_h.nrows();
    let hm = b_h.ncols();
    let mut outer = DMatrix::zeros(2 * n + hm, n);
    outer.view_mut((0, 0), (n, n)).copy_from(&a_h.transpose());
    outer.view_mut((n, 0), (hm, n)).copy_from(&b_h.transpose());
    outer.view_mut((n + hm, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    outer.transpose() * mhj * outer
}

/// Pointwise feasibility of the mode-grid Lyapunov blocks at explicit
/// transition matrices (no data, no solver).
pub fn model_pointwise_feasible(
    phis: &[DMatrix<f64>],
    s: &[DMatrix<f64>],
    g: &[DMatrix<f64>],
) -> bool {
    let h_bar = phis.len();
    let n = phis[0].nrows();
    for h in 0..h_bar {
        for j in 0..h_bar {
            let w = &g[h] + g[h].transpose() - &s[h];
            let pg = &phis[h] * &g[h];
            let mut blk = DMatrix::zeros(2 * n, 2 * n);
            blk.view_mut((0, 0), (n, n)).copy_from(&w);
            blk.view_mut((n, 0), (n, n)).copy_from(&pg);
            blk.view_mut((0, n), (n, n)).copy_from(&pg.transpose());
            blk.view_mut((n, n), (n, n)).copy_from(&s[j]);
            if rel_margin(&blk) <= tol::EIG_TOL {
                return false;
            }
        }
    }
    true
}

/// Mode-grid Lyapunov feasibility for the true plant: one slack pair per
/// level, all transition blocks solved as a single margin-maximized
/// problem.
pub fn model_based_analyze(plant: &LinearPlant, ctrl: &Controller, h_bar: usize) -> Result<bool> {
    if h_bar < 1 {
        return Err(Error::Invalid("h_bar must be at least 1".into()));
    }
    let n = plant.n();
    let phis: Vec<DMatrix<f64>> = (1..=h_bar).map(|h| plant.phi(ctrl, h)).collect();
    let mut prob = LmiProblem::new();
    let s: Vec<VarId> = (0..h_bar).map(|_| prob.sym(n)).collect();
    let g: Vec<VarId> = (0..h_bar).map(|_| prob.rect(n, n)).collect();
    let id = DMatrix::<f64>::identity(n, n);
    for i in 0..h_bar {
        prob.add_constraint(
            n,
            vec![Term::Congr { var: s[i], left: id.clone(), right: id.clone(), transpose: false, coeff: 1.0 }],
            Sense::PdStrict(0.0),
        );
    }
    let e1 = embed(2 * n, 0, n);
    let e2 = embed(2 * n, n, n);
    for h in 0..h_bar {
        for j in 0..h_bar {
            let terms = vec![
                Term::Congr { var: g[h], left: e1.clone(), right: e1.transpose(), transpose: false, coeff: 1.0 },
                Term::Congr { var: g[h], left: e1.clone(), right: e1.transpose(), transpose: true, coeff: 1.0 },
                Term::Congr { var: s[h], left: e1.clone(), right: e1.transpose(), transpose: false, coeff: -1.0 },
                Term::Congr { var: g[h], left: &e2 * &phis[h], right: e1.transpose(), transpose: false, coeff: 1.0 },
                Term::Congr { var: g[h], left: e1.clone(), right: (&e2 * &phis[h]).transpose(), transpose: true, coeff: 1.0 },
                Term::Congr { var: s[j], left: e2.clone(), right: e2.transpose(), transpose: false, coeff: 1.0 },
            ];
            prob.add_constraint(2 * n, terms, Sense::PdStrict(0.0));
        }
    }
    let mut norm = LinForm::trace_of(s[0], n);
    for &sv in &s[1..] {
        norm = norm.plus_trace(sv, n);
    }
    let opts = SolveOptions { normalization: Some((norm, 1.0)), ..Default::default() };
    let out = solver::solve(&prob, &opts)?;
    Ok(out.status == Status::Feasible)
}
