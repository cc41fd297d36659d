//! Small dense linear-algebra helpers shared by the engines.

use nalgebra::DMatrix;

/// Minimum eigenvalue of a symmetric matrix (symmetrized first to guard
/// against representation noise).
pub fn sym_min_eig(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    let eig = s.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// (min, max) eigenvalues of a symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let s = (m + m.transpose()) * 0.5;
    let eig = s.symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Spectral radius of a general square matrix.
///
/// The 2x2 case is closed-form; larger matrices go through the complex
/// eigenvalue decomposition.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 1 {
        return m[(0, 0)].abs();
    }
    if n == 2 {
        return rho_2x2(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    }
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

#[inline]
fn rho_2x2(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr - 4.0 * det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        (0.5 * (tr + r)).abs().max((0.5 * (tr - r)).abs())
    } else {
        det.abs().sqrt()
    }
}

/// Induced 2-norm (largest singular value).
pub fn mat_two_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Integer matrix power by repeated squaring. `k = 0` gives the identity.
pub fn mat_pow(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = m.clone();
    let mut e = k;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    result
}

/// 2-norm condition number; infinite when the smallest singular value
/// vanishes.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let hi = sv.iter().cloned().fold(0.0, f64::max);
    let lo = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Moore-Penrose pseudoinverse with singular values below
/// `rel_tol * sigma_max` treated as zero.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rel_tol * smax;
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let mut sig_inv = DMatrix::zeros(vt.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            sig_inv[(i, i)] = 1.0 / s;
        }
    }
    vt.transpose() * sig_inv * u.transpose()
}

/// Orthonormal basis of the orthogonal complement of `m`'s column range
/// (rows x k, possibly k = 0), from the left singular vectors whose
/// singular values fall at or below `rel_tol * sigma_max`.
pub fn range_complement(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let r = m.nrows();
    let svd = m.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rel_tol * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > cut).count();
    // nalgebra's thin SVD only returns min(r, c) left vectors; complete
    // the basis by projecting out the range from the identity columns
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
    let mut cols: Vec<nalgebra::DVector<f64>> = Vec::new();
    for i in 0..rank {
        cols.push(u.column(i).into_owned());
    }
    for i in 0..r {
        let mut v = nalgebra::DVector::zeros(r);
        v[i] = 1.0;
        for c in cols.iter().chain(basis.iter()) {
            let proj = c.dot(&v);
            v -= c * proj;
        }
        let nrm = v.norm();
        if nrm > 1e-8 {
            basis.push(v / nrm);
        }
        if rank + basis.len() == r {
            break;
        }
    }
    let k = basis.len();
    DMatrix::from_fn(r, k, |i, j| basis[j][i])
}

/// Symmetric inverse square root via eigendecomposition. Eigenvalues are
/// floored at `floor` before inversion so that a marginally indefinite
/// input still produces a usable congruence transform.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let s = (m + m.transpose()) * 0.5;
    let eig = s.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| 1.0 / v.max(floor).sqrt());
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&vals) * q.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn spectral_radius_matches_eig_on_2x2() {
        let m = dmatrix![0.3, 1.1; -0.7, 0.2];
        let via_eig = m
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        assert!((spectral_radius(&m) - via_eig).abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_inverts() {
        let m = dmatrix![4.0, 1.0; 1.0, 3.0];
        let e = sym_inv_sqrt(&m, 1e-300);
        let prod = &e * &m * &e;
        let id = DMatrix::<f64>::identity(2, 2);
        assert!(max_abs(&(prod - id)) < 1e-12);
    }

    #[test]
    fn min_eig_of_diag() {
        let m = DMatrix::from_diagonal(&nalgebra::dvector![3.0, -2.0, 7.0]);
        assert!((sym_min_eig(&m) + 2.0).abs() < 1e-14);
    }

    #[test]
    fn mat_pow_matches_naive() {
        let m = dmatrix![0.9, 0.1; -0.2, 0.8];
        let mut naive = DMatrix::<f64>::identity(2, 2);
        for k in 0..=6 {
            assert!(max_abs(&(mat_pow(&m, k) - &naive)) < 1e-13, "power {k}");
            naive = &naive * &m;
        }
    }

    #[test]
    fn pinv_solves_tall_system() {
        let m = dmatrix![1.0; 2.0];
        let p = pinv(&m, 1e-12);
        let x = &p * dmatrix![3.0; 6.0];
        assert!((x[(0, 0)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn range_complement_annihilates() {
        let m = dmatrix![0.01; 0.0];
        let vc = range_complement(&m, 1e-12);
        assert_eq!(vc.ncols(), 1);
        assert!(max_abs(&(vc.transpose() * &m)) < 1e-12);
        let m2 = dmatrix![1.0, 0.0; 0.0, 1.0];
        assert_eq!(range_complement(&m2, 1e-12).ncols(), 0);
    }
}
