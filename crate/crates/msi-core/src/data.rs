//! Measured trajectories and their matrix arrangements.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// One recorded open-loop experiment: `N+1` states and `N` inputs, with
/// the disturbance bound the record was collected under and the seed that
/// generated it. `h_info` carries the physical discretization period for
/// documentation; no computation uses it.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub d_bar: f64,
    pub seed: u64,
    pub h_info: Option<f64>,
}

impl DataRecord {
    pub fn new(
        states: Vec<DVector<f64>>,
        inputs: Vec<DVector<f64>>,
        d_bar: f64,
        seed: u64,
    ) -> Result<Self> {
        if states.len() != inputs.len() + 1 {
            return Err(Error::Dimension(format!(
                "need N+1 states for N inputs, got {} states and {} inputs",
                states.len(),
                inputs.len()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::Invalid("record must contain at least one step".into()));
        }
        if d_bar < 0.0 {
            return Err(Error::Invalid("d_bar must be nonnegative".into()));
        }
        Ok(Self { states, inputs, d_bar, seed, h_info: None })
    }

    pub fn n_steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// Writes the trajectory as CSV with header `t,x1,...,xn,u1,...,um`.
    /// The final row carries the last state with empty input fields.
    pub fn to_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        wtr.write_record(&header).map_err(csv_err)?;
        for t in 0..self.states.len() {
            let mut row = vec![t.to_string()];
            row.extend(self.states[t].iter().map(|v| format!("{v:.17e}")));
            if t < self.inputs.len() {
                row.extend(self.inputs[t].iter().map(|v| format!("{v:.17e}")));
            } else {
                row.extend(std::iter::repeat(String::new()).take(m));
            }
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parses a trajectory CSV produced by [`DataRecord::to_csv`].
    ///
    /// `d_bar` and `seed` are not part of the CSV; the caller supplies the
    /// values the data was collected under.
    pub fn from_csv<R: std::io::Read>(r: R, d_bar: f64, seed: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_err)?.clone();
        let n = header.iter().filter(|h| h.starts_with('x')).count();
        let m = header.iter().filter(|h| h.starts_with('u')).count();
        if n == 0 || header.len() != 1 + n + m {
            return Err(Error::Parse("trajectory csv: unrecognized header".into()));
        }
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != 1 + n + m {
                return Err(Error::Parse("trajectory csv: wrong field count".into()));
            }
            let x = DVector::from_iterator(
                n,
                (1..=n).map(|i| rec[i].parse::<f64>().unwrap_or(f64::NAN)),
            );
            if x.iter().any(|v| v.is_nan()) {
                return Err(Error::Parse("trajectory csv: bad state field".into()));
            }
            states.push(x);
            let ufields: Vec<&str> = (1 + n..1 + n + m).map(|i| &rec[i]).collect();
            if ufields.iter().all(|f| f.is_empty()) {
                continue; // terminal row
            }
            let u = DVector::from_iterator(
                m,
                ufields.iter().map(|f| f.parse::<f64>().unwrap_or(f64::NAN)),
            );
            if u.iter().any(|v| v.is_nan()) {
                return Err(Error::Parse("trajectory csv: bad input field".into()));
            }
            inputs.push(u);
        }
        Self::new(states, inputs, d_bar, seed)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Snapshot-per-column arrangements `X+`, `X`, `U` of a record.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub xp: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl DataMatrices {
    pub fn build(rec: &DataRecord) -> Self {
        let n = rec.state_dim();
        let m = rec.input_dim();
        let nn = rec.n_steps();
        let mut xp = DMatrix::zeros(n, nn);
        let mut x = DMatrix::zeros(n, nn);
        let mut u = DMatrix::zeros(m, nn);
        for t in 0..nn {
            x.set_column(t, &rec.states[t]);
            xp.set_column(t, &rec.states[t + 1]);
            u.set_column(t, &rec.inputs[t]);
        }
        Self { xp, x, u }
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }
}

/// Lift-by-`h` arrangements: columns pair `x(j)` with `x(j+h)` and the
/// stacked inputs `u(j), ..., u(j+h-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedDataMatrices {
    pub h: usize,
    pub xhp: DMatrix<f64>,
    pub xh: DMatrix<f64>,
    pub uh: DMatrix<f64>,
}

impl LiftedDataMatrices {
    pub fn build(rec: &DataRecord, h: usize) -> Result<Self> {
        let nn = rec.n_steps();
        if h < 1 || h > nn {
            return Err(Error::InsufficientData { h, n: nn });
        }
        let n = rec.state_dim();
        let m = rec.input_dim();
        let nh = nn - h + 1;
        let mut xhp = DMatrix::zeros(n, nh);
        let mut xh = DMatrix::zeros(n, nh);
        let mut uh = DMatrix::zeros(h * m, nh);
        for j in 0..nh {
            xh.set_column(j, &rec.states[j]);
            xhp.set_column(j, &rec.states[j + h]);
            for i in 0..h {
                uh.view_mut((i * m, j), (m, 1)).copy_from(&rec.inputs[j + i]);
            }
        }
        Ok(Self { h, xhp, xh, uh })
    }

    pub fn n_cols(&self) -> usize {
        self.xh.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn toy_record() -> DataRecord {
        let states = vec![
            dvector![1.0, 0.0],
            dvector![0.5, 0.25],
            dvector![0.3, -0.1],
            dvector![0.2, 0.05],
        ];
        let inputs = vec![dvector![1.0], dvector![-1.0], dvector![0.5]];
        DataRecord::new(states, inputs, 0.1, 7).unwrap()
    }

    #[test]
    fn matrices_shapes_and_columns() {
        let rec = toy_record();
        let dm = DataMatrices::build(&rec);
        assert_eq!(dm.x.shape(), (2, 3));
        assert_eq!(dm.xp.shape(), (2, 3));
        assert_eq!(dm.u.shape(), (1, 3));
        assert_eq!(dm.x.column(0), rec.states[0].column(0));
        assert_eq!(dm.xp.column(2), rec.states[3].column(0));
    }

    #[test]
    fn single_step_record() {
        let rec = DataRecord::new(
            vec![dvector![1.0, 0.0], dvector![0.0, 1.0]],
            vec![dvector![0.0]],
            0.0,
            0,
        )
        .unwrap();
        let dm = DataMatrices::build(&rec);
        assert_eq!(dm.xp.column(0), dvector![0.0, 1.0].column(0));
        assert_eq!(dm.x.column(0), dvector![1.0, 0.0].column(0));
    }

    #[test]
    fn lift_h1_matches_plain() {
        let rec = toy_record();
        let dm = DataMatrices::build(&rec);
        let lm = LiftedDataMatrices::build(&rec, 1).unwrap();
        assert_eq!(lm.xhp, dm.xp);
        assert_eq!(lm.xh, dm.x);
        assert_eq!(lm.uh, dm.u);
    }

    #[test]
    fn lift_h2_stacks_inputs() {
        let rec = toy_record();
        let lm = LiftedDataMatrices::build(&rec, 2).unwrap();
        assert_eq!(lm.n_cols(), 2);
        assert_eq!(lm.xh.column(0), rec.states[0].column(0));
        assert_eq!(lm.xhp.column(1), rec.states[3].column(0));
        assert_eq!(lm.uh[(0, 0)], 1.0);
        assert_eq!(lm.uh[(1, 0)], -1.0);
        assert_eq!(lm.uh[(1, 1)], 0.5);
    }

    #[test]
    fn lift_too_deep_errors() {
        let rec = toy_record();
        assert!(LiftedDataMatrices::build(&rec, 4).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rec = toy_record();
        let mut buf = Vec::new();
        rec.to_csv(&mut buf).unwrap();
        let back = DataRecord::from_csv(buf.as_slice(), rec.d_bar, rec.seed).unwrap();
        assert_eq!(rec, back);
    }
}
