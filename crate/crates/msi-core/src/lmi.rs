//! Solver-agnostic LMI feasibility problems.
//!
//! A problem owns scalar, symmetric-matrix and rectangular-matrix decision
//! variables, affine matrix constraints tagged with a semidefinite sense,
//! scalar linear equalities (used for trace normalizations) and an optional
//! linear objective. The conic lowering lives in [`crate::solver`].

use crate::{Error, Result};
use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Scalar,
    /// Symmetric matrix of the given dimension, parametrized by its upper
    /// triangle in column-major (svec) order.
    Sym(usize),
    /// General rectangular matrix, parametrized column-major.
    Rect(usize, usize),
}

impl VarKind {
    pub fn n_slots(&self) -> usize {
        match *self {
            VarKind::Scalar => 1,
            VarKind::Sym(d) => d * (d + 1) / 2,
            VarKind::Rect(r, c) => r * c,
        }
    }
}

/// One additive term of an affine matrix expression.
#[derive(Debug, Clone)]
pub enum Term {
    /// Fixed matrix.
    Const(DMatrix<f64>),
    /// `coeff * L * V * R` where `V` is a matrix variable's value
    /// (transposed first when `transpose` is set).
    Congr {
        var: VarId,
        left: DMatrix<f64>,
        right: DMatrix<f64>,
        transpose: bool,
        coeff: f64,
    },
    /// `coeff * v * M` for a scalar variable `v` and fixed matrix `M`.
    ScalarMat { var: VarId, mat: DMatrix<f64>, coeff: f64 },
    /// Multiplier-style weighted Gram sum over a family of scalar weights:
    /// `sum_i w_i * (-(T e_i)(T e_i)^T + base)`. Keeping the family as one
    /// term avoids materializing a dense coefficient matrix per weight.
    WeightedGram {
        vars: Vec<VarId>,
        t_mat: DMatrix<f64>,
        base: DMatrix<f64>,
        coeff: f64,
    },
}

/// Cone sense of a constraint; strict senses carry the margin that encodes
/// them as non-strict cones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sense {
    Psd,
    PdStrict(f64),
    Nsd,
    NdStrict(f64),
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub terms: Vec<Term>,
    pub sense: Sense,
    pub dim: usize,
    /// Scale of the identity shift applied to this constraint during
    /// margin maximization (see [`crate::solver::SolveOptions`]).
    pub margin_weight: f64,
}

/// Linear functional over the decision variables:
/// `sum_k <C_k, V_k> + sum_j c_j v_j` with Frobenius inner products.
#[derive(Debug, Clone, Default)]
pub struct LinForm {
    pub mat_terms: Vec<(VarId, DMatrix<f64>)>,
    pub scalar_terms: Vec<(VarId, f64)>,
}

impl LinForm {
    pub fn trace_of(var: VarId, dim: usize) -> Self {
        LinForm { mat_terms: vec![(var, DMatrix::identity(dim, dim))], scalar_terms: vec![] }
    }

    pub fn scalar(var: VarId) -> Self {
        LinForm { mat_terms: vec![], scalar_terms: vec![(var, 1.0)] }
    }

    pub fn plus_trace(mut self, var: VarId, dim: usize) -> Self {
        self.mat_terms.push((var, DMatrix::identity(dim, dim)));
        self
    }
}

#[derive(Debug, Clone)]
pub struct LmiProblem {
    pub(crate) vars: Vec<VarKind>,
    pub(crate) nonneg: Vec<VarId>,
    pub constraints: Vec<Constraint>,
    /// Equalities `form == rhs`.
    pub equalities: Vec<(LinForm, f64)>,
    /// Linear objective to minimize; `None` means pure feasibility.
    pub objective: Option<LinForm>,
}

impl LmiProblem {
    pub fn new() -> Self {
        Self { vars: Vec::new(), nonneg: Vec::new(), constraints: Vec::new(), equalities: Vec::new(), objective: None }
    }

    pub fn scalar(&mut self) -> VarId {
        self.vars.push(VarKind::Scalar);
        VarId(self.vars.len() - 1)
    }

    /// Scalar constrained nonnegative in the cone lowering.
    pub fn scalar_nonneg(&mut self) -> VarId {
        let v = self.scalar();
        self.nonneg.push(v);
        v
    }

    pub fn sym(&mut self, d: usize) -> VarId {
        self.vars.push(VarKind::Sym(d));
        VarId(self.vars.len() - 1)
    }

    pub fn rect(&mut self, r: usize, c: usize) -> VarId {
        self.vars.push(VarKind::Rect(r, c));
        VarId(self.vars.len() - 1)
    }

    pub fn kind(&self, v: VarId) -> VarKind {
        self.vars[v.0]
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn n_slots(&self) -> usize {
        self.vars.iter().map(|k| k.n_slots()).sum()
    }

    pub(crate) fn slot_base(&self, v: VarId) -> usize {
        self.vars[..v.0].iter().map(|k| k.n_slots()).sum()
    }

    pub fn add_constraint(&mut self, dim: usize, terms: Vec<Term>, sense: Sense) {
        self.constraints.push(Constraint { terms, sense, dim, margin_weight: 1.0 });
    }

    pub fn add_constraint_weighted(&mut self, dim: usize, terms: Vec<Term>, sense: Sense, w: f64) {
        self.constraints.push(Constraint { terms, sense, dim, margin_weight: w });
    }

    pub fn add_equality(&mut self, form: LinForm, rhs: f64) {
        self.equalities.push((form, rhs));
    }

    pub fn set_objective(&mut self, form: LinForm) {
        self.objective = Some(form);
    }

    /// Dumps the problem structure (variables, one constraint per block,
    /// coefficient entries) for debugging.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        for (i, k) in self.vars.iter().enumerate() {
            writeln!(s, "var {i}: {k:?}").unwrap();
        }
        for (ci, c) in self.constraints.iter().enumerate() {
            writeln!(s, "constraint {ci}: dim {} sense {:?} weight {}", c.dim, c.sense, c.margin_weight).unwrap();
            for t in &c.terms {
                match t {
                    Term::Const(m) => writeln!(s, "  const |max|={:.3e}", crate::linalg::max_abs(m)).unwrap(),
                    Term::Congr { var, left, right, transpose, coeff } => writeln!(
                        s,
                        "  congr var {} {}x{} L{:?} R{:?} t={} c={}",
                        var.0,
                        left.nrows(),
                        right.ncols(),
                        left.shape(),
                        right.shape(),
                        transpose,
                        coeff
                    )
                    .unwrap(),
                    Term::ScalarMat { var, coeff, .. } => {
                        writeln!(s, "  scalar-mat var {} c={}", var.0, coeff).unwrap()
                    }
                    Term::WeightedGram { vars, coeff, .. } => {
                        writeln!(s, "  weighted-gram {} weights c={}", vars.len(), coeff).unwrap()
                    }
                }
            }
        }
        for (form, rhs) in &self.equalities {
            writeln!(
                s,
                "equality: {} matrix terms + {} scalar terms == {rhs}",
                form.mat_terms.len(),
                form.scalar_terms.len()
            )
            .unwrap();
        }
        s
    }
}

impl Default for LmiProblem {
    fn default() -> Self {
        Self::new()
    }
}

/// A concrete value for every declared variable.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub(crate) values: Vec<DMatrix<f64>>,
}

impl Assignment {
    pub(crate) fn from_slots(p: &LmiProblem, x: &[f64]) -> Self {
        let mut values = Vec::with_capacity(p.vars.len());
        let mut off = 0usize;
        for k in &p.vars {
            let v = match *k {
                VarKind::Scalar => DMatrix::from_element(1, 1, x[off]),
                VarKind::Sym(d) => {
                    let mut m = DMatrix::zeros(d, d);
                    let mut idx = off;
                    for j in 0..d {
                        for i in 0..=j {
                            m[(i, j)] = x[idx];
                            m[(j, i)] = x[idx];
                            idx += 1;
                        }
                    }
                    m
                }
                VarKind::Rect(r, c) => {
                    let mut m = DMatrix::zeros(r, c);
                    let mut idx = off;
                    for j in 0..c {
                        for i in 0..r {
                            m[(i, j)] = x[idx];
                            idx += 1;
                        }
                    }
                    m
                }
            };
            off += k.n_slots();
            values.push(v);
        }
        Self { values }
    }

    pub fn mat(&self, v: VarId) -> &DMatrix<f64> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: VarId) -> f64 {
        self.values[v.0][(0, 0)]
    }

    /// Overrides a variable's value (used when freezing weights between
    /// solve phases).
    pub fn set(&mut self, v: VarId, m: DMatrix<f64>) {
        self.values[v.0] = m;
    }
}

/// Evaluates a constraint's matrix at an assignment (exact dense
/// arithmetic; used for independent certificate verification).
pub fn eval_constraint(c: &Constraint, asg: &Assignment) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(c.dim, c.dim);
    for t in &c.terms {
        match t {
            Term::Const(k) => m += k,
            Term::Congr { var, left, right, transpose, coeff } => {
                let v = &asg.values[var.0];
                let prod = if *transpose { left * v.transpose() * right } else { left * v * right };
                m += prod * *coeff;
            }
            Term::ScalarMat { var, mat, coeff } => {
                m += mat * (asg.values[var.0][(0, 0)] * *coeff);
            }
            Term::WeightedGram { vars, t_mat, base, coeff } => {
                for (i, v) in vars.iter().enumerate() {
                    let w = asg.values[v.0][(0, 0)] * *coeff;
                    if w != 0.0 {
                        let col = t_mat.column(i);
                        m.ger(-w, &col, &col, 1.0);
                        m += base * w;
                    }
                }
            }
        }
    }
    (&m + m.transpose()) * 0.5
}

/// Evaluates a linear functional at an assignment.
pub fn eval_form(f: &LinForm, asg: &Assignment) -> f64 {
    let mut v = 0.0;
    for (var, c) in &f.mat_terms {
        v += c.iter().zip(asg.values[var.0].iter()).map(|(a, b)| a * b).sum::<f64>();
    }
    for (var, c) in &f.scalar_terms {
        v += c * asg.values[var.0][(0, 0)];
    }
    v
}

pub(crate) fn check_dims(c: &Constraint) -> Result<()> {
    for t in &c.terms {
        let (r, cc) = match t {
            Term::Const(m) => m.shape(),
            Term::Congr { left, right, .. } => (left.nrows(), right.ncols()),
            Term::ScalarMat { mat, .. } => mat.shape(),
            Term::WeightedGram { t_mat, base, .. } => {
                if base.nrows() != t_mat.nrows() {
                    return Err(Error::Dimension("weighted-gram base/t mismatch".into()));
                }
                base.shape()
            }
        };
        if r != c.dim || cc != c.dim {
            return Err(Error::Dimension(format!(
                "constraint term {r}x{cc} in block of dim {}",
                c.dim
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn assignment_round_trip_sym() {
        let mut p = LmiProblem::new();
        let s = p.sym(2);
        // slots in svec order: (0,0), (0,1), (1,1)
        let asg = Assignment::from_slots(&p, &[1.0, 2.0, 3.0]);
        assert_eq!(asg.mat(s), &dmatrix![1.0, 2.0; 2.0, 3.0]);
    }

    #[test]
    fn eval_congr_and_scalar() {
        let mut p = LmiProblem::new();
        let s = p.sym(2);
        let t = p.scalar();
        let l = DMatrix::<f64>::identity(2, 2);
        let c = Constraint {
            dim: 2,
            sense: Sense::Psd,
            margin_weight: 1.0,
            terms: vec![
                Term::Congr { var: s, left: l.clone(), right: l, transpose: false, coeff: 2.0 },
                Term::ScalarMat { var: t, mat: DMatrix::identity(2, 2), coeff: -1.0 },
            ],
        };
        let mut asg = Assignment::from_slots(&p, &[1.0, 0.0, 1.0, 0.0]);
        asg.set(t, DMatrix::from_element(1, 1, 3.0));
        let m = eval_constraint(&c, &asg);
        assert_eq!(m, dmatrix![-1.0, 0.0; 0.0, -1.0]);
    }

    #[test]
    fn weighted_gram_matches_direct() {
        let mut p = LmiProblem::new();
        let w0 = p.scalar_nonneg();
        let w1 = p.scalar_nonneg();
        let t_mat = dmatrix![1.0, 0.5; -1.0, 2.0];
        let base = dmatrix![0.1, 0.0; 0.0, 0.1];
        let c = Constraint {
            dim: 2,
            sense: Sense::Psd,
            margin_weight: 1.0,
            terms: vec![Term::WeightedGram {
                vars: vec![w0, w1],
                t_mat: t_mat.clone(),
                base: base.clone(),
                coeff: 1.0,
            }],
        };
        let asg = Assignment::from_slots(&p, &[2.0, 3.0]);
        let got = eval_constraint(&c, &asg);
        let mut want = DMatrix::zeros(2, 2);
        for (i, w) in [2.0, 3.0].iter().enumerate() {
            let col = t_mat.column(i);
            want += (&base - col * col.transpose()) * *w;
        }
        assert!(crate::linalg::max_abs(&(got - want)) < 1e-14);
    }
}
