//! Plants, controllers and sampling schedules.

use crate::{linalg, tol, Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// A discrete-time linear plant `x(t+1) = A x(t) + B u(t) + Bd d(t)`.
///
/// The engines never see these matrices; only the simulator and the
/// verification oracles use them as ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub bd: DMatrix<f64>,
}

impl LinearPlant {
    /// Builds a plant, checking dimension consistency and that `Bd` has
    /// full column rank (rank decided relative to the largest singular
    /// value).
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, bd: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("A must be square, got {}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!(
                "B row count {} does not match state dimension {n}",
                b.nrows()
            )));
        }
        if bd.nrows() != n {
            return Err(Error::Dimension(format!(
                "Bd row count {} does not match state dimension {n}",
                bd.nrows()
            )));
        }
        let sv = bd.singular_values();
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let rank = sv.iter().filter(|&&s| s > tol::RANK_TOL * smax).count();
        if rank < bd.ncols() {
            return Err(Error::Invalid(
                "Bd must have full column rank".into(),
            ));
        }
        Ok(Self { a, b, bd })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn nd(&self) -> usize {
        self.bd.ncols()
    }

    /// Closed-loop one-step matrix `A + B K`.
    pub fn closed_loop(&self, k: &Controller) -> DMatrix<f64> {
        &self.a + &self.b * &k.k
    }

    /// Sampled closed-loop transition over a hold of length `h`:
    /// `Phi_h = A^h + (sum_{i=0}^{h-1} A^i) B K`.
    pub fn phi(&self, k: &Controller, h: usize) -> DMatrix<f64> {
        assert!(h >= 1, "hold length must be positive");
        let n = self.n();
        let mut apow = DMatrix::identity(n, n);
        let mut asum = DMatrix::zeros(n, n);
        for _ in 0..h {
            asum += &apow;
            apow = &self.a * apow;
        }
        apow + asum * &self.b * &k.k
    }

    /// The plant used throughout the numerical experiments: a double
    /// integrator-like system discretized at 0.1 s, with the disturbance
    /// entering the first state.
    pub fn example() -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0995, 0.0, 0.9900]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0005, 0.0100]);
        let bd = DMatrix::from_row_slice(2, 1, &[0.01, 0.0]);
        Self::new(a, b, bd).expect("example plant is well-formed")
    }
}

/// Serialized form: row-major nested arrays plus explicit dimensions.
#[derive(Serialize, Deserialize)]
struct PlantJson {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "Bd")]
    bd: Vec<Vec<f64>>,
    n: usize,
    m: usize,
    n_d: usize,
}

fn rows_to_mat(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    if r == 0 {
        return Err(Error::Parse(format!("{what}: empty matrix")));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Parse(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
    Ok(DMatrix::from_row_slice(r, c, &flat))
}

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl LinearPlant {
    pub fn to_json(&self) -> String {
        let j = PlantJson {
            a: mat_to_rows(&self.a),
            b: mat_to_rows(&self.b),
            bd: mat_to_rows(&self.bd),
            n: self.n(),
            m: self.m(),
            n_d: self.nd(),
        };
        serde_json::to_string_pretty(&j).expect("plant serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: PlantJson =
            serde_json::from_str(s).map_err(|e| Error::Parse(format!("plant json: {e}")))?;
        let a = rows_to_mat(&j.a, "A")?;
        let b = rows_to_mat(&j.b, "B")?;
        let bd = rows_to_mat(&j.bd, "Bd")?;
        if a.nrows() != j.n || b.ncols() != j.m || bd.ncols() != j.n_d {
            return Err(Error::Parse("plant json: declared dimensions disagree with matrices".into()));
        }
        Self::new(a, b, bd)
    }
}

/// A static state-feedback gain `u = K x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub k: DMatrix<f64>,
}

impl Controller {
    pub fn new(k: DMatrix<f64>) -> Self {
        Self { k }
    }

    /// Parses a comma-separated row-major gain list into an m x n matrix.
    pub fn parse(s: &str, m: usize, n: usize) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Parse(format!("gain: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != m * n {
            return Err(Error::Parse(format!(
                "gain: expected {} entries, got {}",
                m * n,
                vals.len()
            )));
        }
        Ok(Self::new(DMatrix::from_row_slice(m, n, &vals)))
    }

    /// The fixed analysis gain from the numerical experiments.
    pub fn example() -> Self {
        Self::new(DMatrix::from_row_slice(1, 2, &[-3.75, -11.5]))
    }
}

/// A realized sequence of sampling intervals, all within `[1, h_bar]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSchedule {
    pub h_seq: Vec<usize>,
    pub h_bar: usize,
}

impl SamplingSchedule {
    pub fn new(h_seq: Vec<usize>, h_bar: usize) -> Result<Self> {
        if h_bar < 1 {
            return Err(Error::Invalid("h_bar must be at least 1".into()));
        }
        if h_seq.iter().any(|&h| h < 1 || h > h_bar) {
            return Err(Error::Invalid("schedule entries must lie in [1, h_bar]".into()));
        }
        Ok(Self { h_seq, h_bar })
    }

    /// Sampling instants `t_0 = 0, t_{k+1} = t_k + h_k`.
    pub fn instants(&self) -> Vec<usize> {
        let mut t = vec![0usize];
        for &h in &self.h_seq {
            t.push(t.last().unwrap() + h);
        }
        t
    }

    /// Total horizon covered, `sum h_k`.
    pub fn horizon(&self) -> usize {
        self.h_seq.iter().sum()
    }

    /// Elapsed-time-since-last-sample profile tau(t) for t in [0, horizon):
    /// zero at each sampling instant, incrementing by one in between.
    pub fn sawtooth(&self) -> Vec<usize> {
        let mut tau = Vec::with_capacity(self.horizon());
        for &h in &self.h_seq {
            for j in 0..h {
                tau.push(j);
            }
        }
        tau
    }
}

/// Random plant generation for stress tests: entries scaled so that the
/// resulting `A` has the requested spectral radius.
pub fn random_plant_with_radius(
    n: usize,
    m: usize,
    nd: usize,
    rho: f64,
    rng: &mut impl rand::Rng,
) -> LinearPlant {
    loop {
        let a0 = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let r = linalg::spectral_radius(&a0);
        if r < 1e-9 {
            continue;
        }
        let a = a0 * (rho / r);
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let bd = DMatrix::from_fn(n, nd, |_, _| rng.random_range(-1.0..1.0));
        if let Ok(p) = LinearPlant::new(a, b, bd) {
            return p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_plant_dimensions() {
        let p = LinearPlant::example();
        assert_eq!((p.n(), p.m(), p.nd()), (2, 1, 1));
    }

    #[test]
    fn phi_one_is_closed_loop() {
        let p = LinearPlant::example();
        let k = Controller::example();
        let d = p.phi(&k, 1) - p.closed_loop(&k);
        assert!(linalg::max_abs(&d) < 1e-15);
    }

    #[test]
    fn plant_json_round_trip() {
        let p = LinearPlant::example();
        let q = LinearPlant::from_json(&p.to_json()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rank_deficient_bd_rejected() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::zeros(2, 1);
        let bd = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert!(LinearPlant::new(a, b, bd).is_err());
    }

    #[test]
    fn sawtooth_resets_at_instants() {
        let s = SamplingSchedule::new(vec![3, 1, 2], 3).unwrap();
        assert_eq!(s.sawtooth(), vec![0, 1, 2, 0, 0, 1]);
        assert_eq!(s.instants(), vec![0, 3, 4, 6]);
    }
}
