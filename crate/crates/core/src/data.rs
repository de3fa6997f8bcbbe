//! Snapshot sets, operating regions and the Kronecker utilities the Zubov
//! objective is written in.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

/// Axis-aligned box containing the origin in its interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegionBounds")]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Deserialize)]
struct RegionBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RegionBounds> for Region {
    type Error = Error;

    fn try_from(b: RegionBounds) -> Result<Self> {
        Region::new(b.lower, b.upper)
    }
}

impl Region {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Shape { expected: lower.len(), got: upper.len() });
        }
        if lower.is_empty() {
            return Err(Error::Config("region must have at least one dimension".into()));
        }
        for (i, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < 0.0 && 0.0 < hi) {
                return Err(Error::Config(format!(
                    "region axis {i} is [{lo}, {hi}]; bounds must be finite with the origin strictly inside"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The cube `[-half_width, half_width]^n`.
    pub fn cube(n: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; n], vec![half_width; n])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Closed-box membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| hi - lo).product()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| rng.random_range(lo..=hi))
            .collect()
    }

    /// Restriction of the box to the listed axes.
    pub fn slice(&self, axes: &[usize]) -> Result<Self> {
        if let Some(&bad) = axes.iter().find(|&&a| a >= self.dim()) {
            return Err(Error::Config(format!("axis {bad} out of range for n = {}", self.dim())));
        }
        Self::new(
            axes.iter().map(|&a| self.lower[a]).collect(),
            axes.iter().map(|&a| self.upper[a]).collect(),
        )
    }
}

/// Paired state/derivative samples. Column `i` of `states` and `derivs`
/// was observed at `times[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
    pub derivs: DMatrix<f64>,
}

impl SnapshotSet {
    pub fn new(times: Vec<f64>, states: DMatrix<f64>, derivs: DMatrix<f64>) -> Result<Self> {
        if states.shape() != derivs.shape() {
            return Err(Error::Shape { expected: states.len(), got: derivs.len() });
        }
        if times.len() != states.ncols() {
            return Err(Error::Shape { expected: states.ncols(), got: times.len() });
        }
        Ok(Self { times, states, derivs })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            times: Vec::new(),
            states: DMatrix::zeros(dim, 0),
            derivs: DMatrix::zeros(dim, 0),
        }
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> + '_ {
        let n = self.dim();
        self.states
            .as_slice()
            .chunks_exact(n.max(1))
            .zip(self.derivs.as_slice().chunks_exact(n.max(1)))
            .take(self.len())
    }

    pub fn from_trajectory(traj: &Trajectory) -> Self {
        Self {
            times: traj.times.clone(),
            states: traj.states.clone(),
            derivs: traj.derivs.clone(),
        }
    }

    /// Writes `t, x1..xn, dx1..dxn` rows with 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.dim();
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=n).map(|i| format!("dx{i}")));
        w.write_record(&header)?;
        for (t, (x, dx)) in self.times.iter().zip(self.iter()) {
            let row = std::iter::once(t).chain(x).chain(dx).map(|v| format_f64(*v));
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(BufReader::new(File::open(path)?));
        let width = r.headers()?.len();
        if width < 3 || width % 2 == 0 {
            return Err(Error::Data(format!(
                "{}: expected columns t, x1..xn, dx1..dxn, found {width}",
                path.display()
            )));
        }
        let n = (width - 1) / 2;
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut derivs = Vec::new();
        for record in r.records() {
            let record = record?;
            let values = record
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Data(format!("{}: bad number `{s}`: {e}", path.display())))
                })
                .collect::<Result<Vec<f64>>>()?;
            times.push(values[0]);
            states.extend_from_slice(&values[1..=n]);
            derivs.extend_from_slice(&values[n + 1..]);
        }
        let len = times.len();
        Self::new(times, DMatrix::from_vec(n, len, states), DMatrix::from_vec(n, len, derivs))
    }
}

/// Fixed-width scientific notation with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Backward differences, with a forward difference for the first sample so
/// the column count is preserved.
pub fn finite_difference(times: &[f64], states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let count = states.ncols();
    if count < 2 {
        return Err(Error::Data(format!("finite differences need at least 2 samples, got {count}")));
    }
    if times.len() != count {
        return Err(Error::Shape { expected: count, got: times.len() });
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Data("sample times must be strictly increasing".into()));
    }
    let mut out = DMatrix::zeros(states.nrows(), count);
    for i in 1..count {
        let dt = times[i] - times[i - 1];
        out.set_column(i, &((states.column(i) - states.column(i - 1)) / dt));
    }
    let first = out.column(1).clone_owned();
    out.set_column(0, &first);
    Ok(out)
}

/// Keeps the finite `(state, deriv)` pairs whose state lies in the closed
/// region, preserving order.
pub fn filter_to_region(traj: &Trajectory, region: &Region) -> Result<SnapshotSet> {
    let n = traj.dim();
    if region.dim() != n {
        return Err(Error::Shape { expected: region.dim(), got: n });
    }
    let keep: Vec<usize> = (0..traj.len())
        .filter(|&i| {
            let x = traj.states.column(i);
            let dx = traj.derivs.column(i);
            x.iter().chain(dx.iter()).all(|v| v.is_finite()) && region.contains(x.as_slice())
        })
        .collect();
    if keep.is_empty() {
        log::warn!("no snapshots of a {}-point trajectory fall inside the region", traj.len());
    }
    Ok(SnapshotSet {
        times: keep.iter().map(|&i| traj.times[i]).collect(),
        states: traj.states.select_columns(&keep),
        derivs: traj.derivs.select_columns(&keep),
    })
}

/// Column-wise concatenation.
pub fn concat(sets: &[SnapshotSet]) -> Result<SnapshotSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Data("cannot concatenate an empty list of snapshot sets".into()))?;
    let n = first.dim();
    if let Some(bad) = sets.iter().find(|s| s.dim() != n) {
        return Err(Error::Shape { expected: n, got: bad.dim() });
    }
    let total: usize = sets.iter().map(SnapshotSet::len).sum();
    let mut times = Vec::with_capacity(total);
    let mut states = Vec::with_capacity(n * total);
    let mut derivs = Vec::with_capacity(n * total);
    for s in sets {
        times.extend_from_slice(&s.times);
        states.extend_from_slice(s.states.as_slice());
        derivs.extend_from_slice(s.derivs.as_slice());
    }
    Ok(SnapshotSet {
        times,
        states: DMatrix::from_vec(n, total, states),
        derivs: DMatrix::from_vec(n, total, derivs),
    })
}

/// `x ⊗ y` with the index of `x` most significant.
pub fn kron(x: &[f64], y: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len() * y.len(), x.iter().flat_map(|a| y.iter().map(move |b| a * b)))
}

/// k-fold Kronecker power of `x`.
pub fn kron_pow(x: &[f64], k: usize) -> DVector<f64> {
    assert!(k >= 1, "Kronecker power needs k >= 1");
    let mut out = DVector::from_column_slice(x);
    for _ in 1..k {
        out = kron(out.as_slice(), x);
    }
    out
}

/// `ẋ ⊗ x + x ⊗ ẋ`, i.e. `vec(ẋxᵀ + xẋᵀ)`.
pub fn x_circledast(x: &[f64], xdot: &[f64]) -> DVector<f64> {
    assert_eq!(x.len(), xdot.len(), "state and derivative dimensions differ");
    let n = x.len();
    DVector::from_fn(n * n, |idx, _| {
        let (i, j) = (idx / n, idx % n);
        xdot[i] * x[j] + x[i] * xdot[j]
    })
}
