//! Disturbance multiplier cones and the induced system-consistency
//! multipliers: every matrix pair compatible with the measured data
//! satisfies a quadratic matrix inequality parameterized by these cones.

use crate::data::{DataMatrices, LiftedDataMatrices};
use crate::{linalg, tol, Error, Result};
use nalgebra::DMatrix;

/// Cone of disturbance multipliers.
///
/// * `Diagonal`: one nonnegative weight per data column; encodes the
///   componentwise bound ||d(t)||_2 <= d_bar per sample. `n_data` is the
///   number of columns the weights act on.
/// * `Quadratic`: a single ray tau * [[Q_d, S_d], [S_d', R_d]] bounding
///   the whole disturbance trajectory at once; Q_d is n_data x n_data
///   and must be negative definite.
#[derive(Debug, Clone)]
pub enum MultiplierClass {
    Diagonal { d_bar: f64, n_data: usize },
    Quadratic { qd: DMatrix<f64>, sd: DMatrix<f64>, rd: DMatrix<f64> },
}

/// Weights selecting one element of the cone.
#[derive(Debug, Clone)]
pub enum MultiplierWeights {
    Diagonal(Vec<f64>),
    Quadratic(f64),
}

/// Cone family selector for engines that build their multiplier classes
/// internally (one per lifted level).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultKind {
    Diagonal,
    Quadratic,
}

impl MultiplierClass {
    pub fn diagonal(d_bar: f64, n_data: usize) -> Result<Self> {
        if !(d_bar >= 0.0) {
            return Err(Error::Invalid("d_bar must be nonnegative".into()));
        }
        if n_data == 0 {
            return Err(Error::Invalid("need at least one data column".into()));
        }
        Ok(Self::Diagonal { d_bar, n_data })
    }

    pub fn quadratic(qd: DMatrix<f64>, sd: DMatrix<f64>, rd: DMatrix<f64>) -> Result<Self> {
        if !qd.is_square() || !rd.is_square() {
            return Err(Error::Dimension("Q_d and R_d must be square".into()));
        }
        if sd.nrows() != qd.nrows() || sd.ncols() != rd.nrows() {
            return Err(Error::Dimension("S_d must be n_data x n_d".into()));
        }
        if linalg::sym_eig_range(&qd).1 >= 0.0 {
            return Err(Error::Invalid("Q_d must be negative definite".into()));
        }
        Ok(Self::Quadratic { qd, sd, rd })
    }

    /// Standard class of a given kind for one lifted level: per-column
    /// weights, or the single-ray cone with Q_d = -I, S_d = 0 and
    /// R_d = d_bar^2 N I.
    pub fn for_kind(kind: MultKind, d_bar: f64, n_data: usize, n_d: usize) -> Result<Self> {
        match kind {
            MultKind::Diagonal => Self::diagonal(d_bar, n_data),
            MultKind::Quadratic => Self::quadratic(
                -DMatrix::<f64>::identity(n_data, n_data),
                DMatrix::zeros(n_data, n_d),
                DMatrix::<f64>::identity(n_d, n_d) * (d_bar * d_bar * n_data as f64),
            ),
        }
    }

    /// Number of decision variables parameterizing the cone.
    pub fn decision_count(&self) -> usize {
        match self {
            Self::Diagonal { n_data, .. } => *n_data,
            Self::Quadratic { .. } => 1,
        }
    }

    /// Builds the multiplier matrix selected by `weights`. `n_d` is the
    /// disturbance dimension sizing the trailing block for the diagonal
    /// kind (the quadratic kind carries it in R_d).
    pub fn instantiate(&self, weights: &MultiplierWeights, n_d: usize) -> Result<DMatrix<f64>> {
        match (self, weights) {
            (Self::Diagonal { d_bar, n_data }, MultiplierWeights::Diagonal(p)) => {
                if p.len() != *n_data {
                    return Err(Error::Dimension(format!(
                        "expected {} weights, got {}",
                        n_data,
                        p.len()
                    )));
                }
                if p.iter().any(|&w| w < 0.0) {
                    return Err(Error::Invalid("diagonal weights must be nonnegative".into()));
                }
                let dim = n_data + n_d;
                let mut out = DMatrix::zeros(dim, dim);
                for (i, &w) in p.iter().enumerate() {
                    out[(i, i)] = -w;
                }
                let s: f64 = p.iter().sum();
                for i in 0..n_d {
                    out[(n_data + i, n_data + i)] = s * d_bar * d_bar;
                }
                Ok(out)
            }
            (Self::Quadratic { qd, sd, rd }, MultiplierWeights::Quadratic(tau)) => {
                if !(*tau >= 0.0) {
                    return Err(Error::Invalid("tau must be nonnegative".into()));
                }
                let nq = qd.nrows();
                let nr = rd.nrows();
                let dim = nq + nr;
                let mut out = DMatrix::zeros(dim, dim);
                out.view_mut((0, 0), (nq, nq)).copy_from(qd);
                out.view_mut((0, nq), (nq, nr)).copy_from(sd);
                out.view_mut((nq, 0), (nr, nq)).copy_from(&sd.transpose());
                out.view_mut((nq, nq), (nr, nr)).copy_from(rd);
                out *= *tau;
                Ok(out)
            }
            _ => Err(Error::Invalid("weights do not match the multiplier kind".into())),
        }
    }
}

/// Bordered data matrix `[-X 0; -U 0; X+ Bd_eff]` whose congruence
/// carries a disturbance multiplier onto the system matrices.
pub fn data_border(data: &LiftedDataMatrices, bd_eff: &DMatrix<f64>) -> DMatrix<f64> {
    let n = data.xh.nrows();
    let hm = data.uh.nrows();
    let cols = data.xh.ncols();
    let nd = bd_eff.ncols();
    let mut m = DMatrix::zeros(2 * n + hm, cols + nd);
    m.view_mut((0, 0), (n, cols)).copy_from(&(-&data.xh));
    m.view_mut((n, 0), (hm, cols)).copy_from(&(-&data.uh));
    m.view_mut((n + hm, 0), (n, cols)).copy_from(&data.xhp);
    m.view_mut((n + hm, cols), (n, nd)).copy_from(bd_eff);
    m
}

/// Carries an instantiated disturbance multiplier onto the system
/// matrices by congruence with the bordered data matrix.
pub fn lift_multiplier(
    data: &LiftedDataMatrices,
    pd: &DMatrix<f64>,
    bd_eff: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let cols = data.xh.ncols();
    let nd = bd_eff.ncols();
    if pd.nrows() != cols + nd || pd.ncols() != cols + nd {
        return Err(Error::Dimension(format!(
            "multiplier is {}x{}, bordered data needs {}",
            pd.nrows(),
            pd.ncols(),
            cols + nd
        )));
    }
    if bd_eff.nrows() != data.xh.nrows() {
        return Err(Error::Dimension("Bd_eff row count mismatch".into()));
    }
    let m = data_border(data, bd_eff);
    Ok(&m * pd * m.transpose())
}

/// A disturbance multiplier cone attached to one lifted data set: its
/// instantiations are the system-consistency multipliers at level h.
#[derive(Debug, Clone)]
pub struct SystemMultiplier {
    pub data: LiftedDataMatrices,
    pub bd_eff: DMatrix<f64>,
    pub base: MultiplierClass,
}

impl SystemMultiplier {
    pub fn new(data: LiftedDataMatrices, bd_eff: DMatrix<f64>, base: MultiplierClass) -> Result<Self> {
        if bd_eff.nrows() != data.xh.nrows() {
            return Err(Error::Dimension("Bd_eff rows must match the state dimension".into()));
        }
        if let MultiplierClass::Diagonal { n_data, .. } = &base {
            if *n_data != data.xh.ncols() {
                return Err(Error::Dimension("weight count must match data columns".into()));
            }
        }
        Ok(Self { data, bd_eff, base })
    }

    /// Side length of the lifted multiplier (n + h m + n).
    pub fn dim(&self) -> usize {
        2 * self.data.xh.nrows() + self.data.uh.nrows()
    }

    pub fn instantiate(&self, weights: &MultiplierWeights) -> Result<DMatrix<f64>> {
        let pd = self.base.instantiate(weights, self.bd_eff.ncols())?;
        lift_multiplier(&self.data, &pd, &self.bd_eff)
    }

    /// Rank-one decomposition of the lifted diagonal multiplier:
    /// `P_AB(p) = sum_i p_i * (-(t e_i)(t e_i)' + base)` where `t` stacks
    /// `[-X; -U; X+]` and `base = d_bar^2 * btil btil'`.
    pub fn gram_parts(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let MultiplierClass::Diagonal { d_bar, .. } = &self.base else {
            return Err(Error::Invalid("gram decomposition requires the diagonal kind".into()));
        };
        let n = self.data.xh.nrows();
        let hm = self.data.uh.nrows();
        let cols = self.data.xh.ncols();
        let mut t = DMatrix::zeros(2 * n + hm, cols);
        t.view_mut((0, 0), (n, cols)).copy_from(&(-&self.data.xh));
        t.view_mut((n, 0), (hm, cols)).copy_from(&(-&self.data.uh));
        t.view_mut((n + hm, 0), (n, cols)).copy_from(&self.data.xhp);
        let mut btil = DMatrix::zeros(2 * n + hm, self.bd_eff.ncols());
        btil.view_mut((n + hm, 0), (n, self.bd_eff.ncols())).copy_from(&self.bd_eff);
        let base = &btil * btil.transpose() * (d_bar * d_bar);
        Ok((t, base))
    }
}

/// Least-squares disturbance recovery: solves `Bd D = R` column-wise and
/// reports the out-of-range residual.
fn recover_disturbance(bd: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let svd = bd.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.iter().any(|&s| s <= tol::RANK_TOL * smax) || smax == 0.0 {
        return Err(Error::Invalid("Bd must have full column rank".into()));
    }
    let d = svd
        .solve(r, 0.0)
        .map_err(|e| Error::Invalid(format!("least squares failed: {e}")))?;
    let resid = (bd * &d - r).norm();
    Ok((d, resid))
}

/// Membership test for the set of system matrices compatible with the
/// data: recovers the disturbance trajectory by least squares and checks
/// it against the declared model (per-column bound for the diagonal
/// kind, the trajectory quadratic form for the quadratic kind).
pub fn is_consistent(
    data: &DataMatrices,
    mult: &MultiplierClass,
    bd: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<bool> {
    let n = data.x.nrows();
    if a.nrows() != n || a.ncols() != n || b.nrows() != n || b.ncols() != data.u.nrows() {
        return Err(Error::Dimension("candidate system dimensions mismatch".into()));
    }
    let r = &data.xp - a * &data.x - b * &data.u;
    let (d, range_resid) = recover_disturbance(bd, &r)?;
    let range_tol = tol::RANGE_TOL_REL * (1.0 + r.norm());
    if range_resid > range_tol {
        return Ok(false);
    }
    match mult {
        MultiplierClass::Diagonal { d_bar, .. } => {
            Ok((0..d.ncols()).all(|j| d.column(j).norm() <= d_bar + range_tol))
        }
        MultiplierClass::Quadratic { qd, sd, rd } => {
            // [D I] * Pd * [D I]' >= 0 for the ray generator (tau = 1)
            let q = &d * qd * d.transpose()
                + &d * sd
                + (&d * sd).transpose()
                + rd;
            let scale = linalg::mat_two_norm(&q).max(1.0);
            Ok(linalg::sym_min_eig(&q) >= -tol::QMI_TOL * scale)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::LinearPlant;
    use crate::sim::{generate_data, NoiseSpec};
    use nalgebra::{dmatrix, dvector, DVector};

    #[test]
    fn quadratic_ray_example() {
        let n_data = 4;
        let d_bar = 0.1;
        let rd = DMatrix::<f64>::identity(1, 1) * (d_bar * d_bar * n_data as f64);
        let class = MultiplierClass::quadratic(
            -DMatrix::<f64>::identity(n_data, n_data),
            DMatrix::zeros(n_data, 1),
            rd.clone(),
        )
        .unwrap();
        let pd = class.instantiate(&MultiplierWeights::Quadratic(1.0), 1).unwrap();
        assert_eq!(pd.nrows(), n_data + 1);
        for i in 0..n_data {
            assert_eq!(pd[(i, i)], -1.0);
        }
        assert!((pd[(n_data, n_data)] - 0.04).abs() < 1e-15);
        assert_eq!(class.decision_count(), 1);
    }

    #[test]
    fn diagonal_example_values() {
        let class = MultiplierClass::diagonal(0.1, 2).unwrap();
        let pd = class
            .instantiate(&MultiplierWeights::Diagonal(vec![1.0, 2.0]), 1)
            .unwrap();
        let expect = dmatrix![-1.0, 0.0, 0.0; 0.0, -2.0, 0.0; 0.0, 0.0, 0.03];
        assert!((pd - expect).norm() < 1e-15);
        assert_eq!(class.decision_count(), 2);
    }

    #[test]
    fn zero_noise_degenerate() {
        let class = MultiplierClass::diagonal(0.0, 3).unwrap();
        let pd = class
            .instantiate(&MultiplierWeights::Diagonal(vec![1.0; 3]), 2)
            .unwrap();
        let mut expect = DMatrix::zeros(5, 5);
        for i in 0..3 {
            expect[(i, i)] = -1.0;
        }
        assert!((pd - expect).norm() < 1e-15);
    }

    #[test]
    fn cone_homogeneous_and_additive() {
        let class = MultiplierClass::diagonal(0.2, 3).unwrap();
        let w1 = MultiplierWeights::Diagonal(vec![1.0, 0.5, 0.0]);
        let w2 = MultiplierWeights::Diagonal(vec![0.2, 0.1, 2.0]);
        let sum = MultiplierWeights::Diagonal(vec![1.2, 0.6, 2.0]);
        let p1 = class.instantiate(&w1, 1).unwrap();
        let p2 = class.instantiate(&w2, 1).unwrap();
        let ps = class.instantiate(&sum, 1).unwrap();
        assert!((&p1 + &p2 - ps).norm() < 1e-14);
        let scaled = MultiplierWeights::Diagonal(vec![3.0, 1.5, 0.0]);
        assert!((class.instantiate(&scaled, 1).unwrap() - &p1 * 3.0).norm() < 1e-14);
    }

    #[test]
    fn lift_is_bordered_congruence() {
        let plant = LinearPlant::example();
        let noise = NoiseSpec::uniform(0.01, 5).unwrap();
        let rec = generate_data(&plant, &noise, 12, (-1.0, 1.0), &dvector![0.0, 0.0]).unwrap();
        let lifted = LiftedDataMatrices::build(&rec, 2).unwrap();
        let n_h = lifted.xh.ncols();
        let class = MultiplierClass::diagonal(0.01, n_h).unwrap();
        let w = MultiplierWeights::Diagonal((0..n_h).map(|i| 0.5 + i as f64).collect());
        let pd = class.instantiate(&w, 1).unwrap();
        let bd_eff = plant.bd.clone();
        let pab = lift_multiplier(&lifted, &pd, &bd_eff).unwrap();
        assert_eq!(pab.nrows(), 2 + 2 * 1 + 2);
        // independent dense congruence
        let m = data_border(&lifted, &bd_eff);
        let dense = &m * &pd * m.transpose();
        assert!((&pab - dense).norm() < 1e-12);
        // linearity: zero multiplier lifts to zero
        let zero = lift_multiplier(&lifted, &DMatrix::zeros(n_h + 1, n_h + 1), &bd_eff).unwrap();
        assert!(zero.norm() == 0.0);
    }

    #[test]
    fn gram_parts_match_instantiation() {
        let plant = LinearPlant::example();
        let noise = NoiseSpec::uniform(0.05, 9).unwrap();
        let rec = generate_data(&plant, &noise, 10, (-1.0, 1.0), &dvector![0.0, 0.0]).unwrap();
        let lifted = LiftedDataMatrices::build(&rec, 1).unwrap();
        let n_h = lifted.xh.ncols();
        let class = MultiplierClass::diagonal(0.05, n_h).unwrap();
        let sm = SystemMultiplier::new(lifted, plant.bd.clone(), class).unwrap();
        let p: Vec<f64> = (0..n_h).map(|i| 0.1 * (i + 1) as f64).collect();
        let direct = sm.instantiate(&MultiplierWeights::Diagonal(p.clone())).unwrap();
        let (t, base) = sm.gram_parts().unwrap();
        let mut acc = DMatrix::zeros(sm.dim(), sm.dim());
        for (i, &w) in p.iter().enumerate() {
            let col = t.column(i);
            acc.ger(-w, &col, &col, 1.0);
            acc += &base * w;
        }
        assert!((direct - acc).norm() < 1e-11);
    }

    #[test]
    fn true_system_is_consistent() {
        let plant = LinearPlant::example();
        let noise = NoiseSpec::uniform(0.01, 2).unwrap();
        let rec = generate_data(&plant, &noise, 50, (-1.0, 1.0), &dvector![0.0, 0.0]).unwrap();
        let data = DataMatrices::build(&rec);
        let class = MultiplierClass::diagonal(0.01, 50).unwrap();
        assert!(is_consistent(&data, &class, &plant.bd, &plant.a, &plant.b).unwrap());
    }

    #[test]
    fn noise_free_exact_system_consistent() {
        let plant = LinearPlant::example();
        let noise = NoiseSpec::uniform(0.0, 2).unwrap();
        let rec = generate_data(&plant, &noise, 20, (-1.0, 1.0), &dvector![0.0, 0.0]).unwrap();
        let data = DataMatrices::build(&rec);
        let class = MultiplierClass::diagonal(0.0, 20).unwrap();
        assert!(is_consistent(&data, &class, &plant.bd, &plant.a, &plant.b).unwrap());
    }

    #[test]
    fn perturbed_system_is_inconsistent() {
        let plant = LinearPlant::example();
        let noise = NoiseSpec::uniform(0.01, 2).unwrap();
        let rec = generate_data(&plant, &noise, 50, (-1.0, 1.0), &dvector![0.0, 0.0]).unwrap();
        let data = DataMatrices::build(&rec);
        let class = MultiplierClass::diagonal(0.01, 50).unwrap();
        let bad_a = &plant.a + DMatrix::identity(2, 2) * 10.0;
        assert!(!is_consistent(&data, &class, &plant.bd, &bad_a, &plant.b).unwrap());
    }

    #[test]
    fn consistent_pair_satisfies_lifted_qmi() {
        // S-procedure seed: J Pab J' >= -tol for J = [A B I] when (A, B)
        // is data-consistent and the multiplier weights are admissible.
        let plant = LinearPlant::example();
        let noise = NoiseSpec::uniform(0.02, 14).unwrap();
        let rec = generate_data(&plant, &noise, 30, (-1.0, 1.0), &dvector![0.0, 0.0]).unwrap();
        let lifted = LiftedDataMatrices::build(&rec, 1).unwrap();
        let class = MultiplierClass::diagonal(0.02, 30).unwrap();
        let sm = SystemMultiplier::new(lifted, plant.bd.clone(), class).unwrap();
        let pab = sm
            .instantiate(&MultiplierWeights::Diagonal(vec![1.0; 30]))
            .unwrap();
        let n = plant.n();
        let mut j = DMatrix::zeros(n, sm.dim());
        j.view_mut((0, 0), (n, n)).copy_from(&plant.a);
        j.view_mut((0, n), (n, plant.m())).copy_from(&plant.b);
        j.view_mut((0, n + plant.m()), (n, n)).copy_from(&DMatrix::identity(n, n));
        let q = &j * pab * j.transpose();
        let scale = crate::linalg::mat_two_norm(&q).max(1.0);
        assert!(crate::linalg::sym_min_eig(&q) >= -crate::tol::QMI_TOL * scale);
    }

    #[test]
    fn mismatched_weights_rejected() {
        let class = MultiplierClass::diagonal(0.1, 2).unwrap();
        assert!(class.instantiate(&MultiplierWeights::Quadratic(1.0), 1).is_err());
        assert!(class
            .instantiate(&MultiplierWeights::Diagonal(vec![-1.0, 1.0]), 1)
            .is_err());
        // the cone apex is admissible and lifts to the zero matrix
        let apex = class
            .instantiate(&MultiplierWeights::Diagonal(vec![0.0, 0.0]), 1)
            .unwrap();
        assert!(apex.norm() == 0.0);
    }

    #[test]
    fn monotone_in_data_for_fixed_seed() {
        // Appending columns keeps the true system consistent (the
        // feasibility region can only shrink toward the truth, never
        // exclude it).
        let plant = LinearPlant::example();
        for n_steps in [10usize, 30, 60] {
            let noise = NoiseSpec::uniform(0.01, 21).unwrap();
            let rec =
                generate_data(&plant, &noise, n_steps, (-1.0, 1.0), &DVector::zeros(2)).unwrap();
            let data = DataMatrices::build(&rec);
            let class = MultiplierClass::diagonal(0.01, n_steps).unwrap();
            assert!(is_consistent(&data, &class, &plant.bd, &plant.a, &plant.b).unwrap());
        }
    }
}
