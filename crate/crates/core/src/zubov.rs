//! Quadratic Lyapunov ansatz and the Zubov-residual least-squares objective.
//!
//! With `V(x) = xᵀPx` and `h(x) = xᵀQx` the Zubov residual at a snapshot is
//!
//! ```text
//! R = ẋᵀPx + xᵀPẋ + xᵀQx - (xᵀQx)(xᵀPx) = pᵀa + b
//! a = x⊛ - (xᵀQx) x⊗x,   b = xᵀQx,   p = vec(P)
//! ```
//!
//! so the mean squared residual is the quadratic `pᵀGp + 2gᵀp + c0` with
//! `G = mean(a aᵀ)`, `g = mean(b a)` and `c0 = mean(b²)`. Only `G` is ever
//! stored; the `n⁴`-row Kronecker data matrix is never formed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{kron, x_circledast, SnapshotSet};
use crate::error::{Error, Result};
use crate::seeded_rng;

/// Snapshots per Gram-accumulation block. Blocks are merged along a fixed
/// binary tree, so results do not depend on the thread count.
const BLOCK: usize = 1024;

/// Symmetric `n x n` matrix defining `xᵀMx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Rows", into = "Rows")]
pub struct QuadraticForm {
    mat: DMatrix<f64>,
}

/// Row-major nested-array representation used in JSON files.
#[derive(Serialize, Deserialize)]
#[serde(transparent)]
struct Rows(Vec<Vec<f64>>);

impl TryFrom<Rows> for QuadraticForm {
    type Error = Error;

    fn try_from(rows: Rows) -> Result<Self> {
        let n = rows.0.len();
        if let Some(bad) = rows.0.iter().find(|r| r.len() != n) {
            return Err(Error::Shape { expected: n, got: bad.len() });
        }
        let flat: Vec<f64> = rows.0.into_iter().flatten().collect();
        QuadraticForm::from_symmetric(DMatrix::from_row_slice(n, n, &flat))
    }
}

impl From<QuadraticForm> for Rows {
    fn from(q: QuadraticForm) -> Self {
        Rows(q.mat.row_iter().map(|r| r.iter().copied().collect()).collect())
    }
}

impl QuadraticForm {
    /// Accepts a matrix that is symmetric up to rounding and stores its exact
    /// symmetric part.
    pub fn from_symmetric(mat: DMatrix<f64>) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::Shape { expected: mat.nrows(), got: mat.ncols() });
        }
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix has non-finite entries".into()));
        }
        let scale = mat.amax().max(f64::MIN_POSITIVE);
        let asym = (&mat - mat.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::Numeric(format!("matrix is not symmetric (max |M - Mᵀ| = {asym:e})")));
        }
        Ok(Self::symmetric_part(&mat))
    }

    /// `(M + Mᵀ) / 2` of any square matrix.
    pub fn symmetric_part(mat: &DMatrix<f64>) -> Self {
        Self { mat: (mat + mat.transpose()) * 0.5 }
    }

    /// Symmetric part of `mat(p)` for a column-major `p` of length `n²`.
    pub fn from_vec(p: &DVector<f64>, n: usize) -> Self {
        assert_eq!(p.len(), n * n, "vector length is not n²");
        Self::symmetric_part(&DMatrix::from_column_slice(n, n, p.as_slice()))
    }

    pub fn scaled_identity(n: usize, gamma: f64) -> Self {
        Self { mat: DMatrix::identity(n, n) * gamma }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    /// `vec(M)`, column-major.
    pub fn vec(&self) -> DVector<f64> {
        DVector::from_column_slice(self.mat.as_slice())
    }

    /// `xᵀMx`.
    pub fn value(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let m = self.mat.as_slice();
        let mut acc = 0.0;
        for j in 0..n {
            let col = &m[j * n..(j + 1) * n];
            let dot: f64 = col.iter().zip(x).map(|(a, b)| a * b).sum();
            acc += x[j] * dot;
        }
        acc
    }

    /// `xᵀMy`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let n = self.dim();
        let m = self.mat.as_slice();
        (0..n)
            .map(|j| {
                let col = &m[j * n..(j + 1) * n];
                y[j] * col.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        SymmetricEigen::new(self.mat.clone()).eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().max()
    }

    /// Fails unless every eigenvalue is strictly positive.
    pub fn require_positive_definite(&self) -> Result<()> {
        let lmin = self.min_eigenvalue();
        if lmin > 0.0 {
            Ok(())
        } else {
            Err(Error::NotPositiveDefinite(lmin))
        }
    }

    /// Principal submatrix on the given axes.
    pub fn restrict(&self, axes: &[usize]) -> Self {
        Self { mat: self.mat.select_rows(axes).select_columns(axes) }
    }
}

/// Zubov residual `ẋᵀPx + xᵀPẋ + xᵀQx − (xᵀQx)(xᵀPx)`.
pub fn residual(p: &QuadraticForm, q: &QuadraticForm, x: &[f64], xdot: &[f64]) -> f64 {
    let h = q.value(x);
    2.0 * p.bilinear(x, xdot) + h - h * p.value(x)
}

/// Assembled least-squares data for the mean squared Zubov residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZubovProblem {
    pub dim: usize,
    pub count: usize,
    /// `n² x n²` Gram matrix.
    #[serde(with = "row_major")]
    pub gram: DMatrix<f64>,
    #[serde(with = "column")]
    pub linear: DVector<f64>,
    pub constant: f64,
}

struct Partial {
    gram: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
}

impl Partial {
    fn merge(mut self, other: Partial) -> Partial {
        self.gram += other.gram;
        self.linear += other.linear;
        self.constant += other.constant;
        self
    }
}

fn accumulate_block(data: &SnapshotSet, q: &QuadraticForm, range: std::ops::Range<usize>) -> Partial {
    let n = data.dim();
    let m = range.len();
    let mut design = DMatrix::zeros(n * n, m);
    let mut offsets = DVector::zeros(m);
    for (col, i) in range.enumerate() {
        let x = data.states.column(i);
        let xdot = data.derivs.column(i);
        let b = q.value(x.as_slice());
        let a = x_circledast(x.as_slice(), xdot.as_slice()) - kron(x.as_slice(), x.as_slice()) * b;
        design.set_column(col, &a);
        offsets[col] = b;
    }
    Partial {
        gram: &design * design.transpose(),
        linear: &design * &offsets,
        constant: offsets.norm_squared(),
    }
}

fn accumulate_tree(data: &SnapshotSet, q: &QuadraticForm, blocks: std::ops::Range<usize>) -> Partial {
    if blocks.len() == 1 {
        let start = blocks.start * BLOCK;
        let end = (start + BLOCK).min(data.len());
        return accumulate_block(data, q, start..end);
    }
    let mid = blocks.start + blocks.len() / 2;
    let (left, right) = rayon::join(
        || accumulate_tree(data, q, blocks.start..mid),
        || accumulate_tree(data, q, mid..blocks.end),
    );
    left.merge(right)
}

/// Builds `(G, g, c0)` for the snapshot set with auxiliary weight `Q`.
pub fn assemble(data: &SnapshotSet, q: &QuadraticForm) -> Result<ZubovProblem> {
    let n = data.dim();
    if q.dim() != n {
        return Err(Error::Shape { expected: n, got: q.dim() });
    }
    let count = data.len();
    if count == 0 {
        return Err(Error::Data("cannot assemble the Zubov objective from zero snapshots".into()));
    }
    let blocks = count.div_ceil(BLOCK);
    let total = accumulate_tree(data, q, 0..blocks);
    let scale = 1.0 / count as f64;
    let gram = (&total.gram + total.gram.transpose()) * (0.5 * scale);
    Ok(ZubovProblem {
        dim: n,
        count,
        gram,
        linear: total.linear * scale,
        constant: total.constant * scale,
    })
}

impl ZubovProblem {
    fn check(&self, p: &QuadraticForm) {
        assert_eq!(p.dim(), self.dim, "quadratic form dimension does not match problem");
    }

    /// `pᵀGp + 2gᵀp + c0`.
    pub fn objective(&self, p: &QuadraticForm) -> f64 {
        self.check(p);
        self.objective_vec(&p.vec())
    }

    pub(crate) fn objective_vec(&self, p: &DVector<f64>) -> f64 {
        p.dot(&(&self.gram * p)) + 2.0 * self.linear.dot(p) + self.constant
    }

    /// `2(Gp + g)` as a length-`n²` vector.
    pub fn gradient(&self, p: &QuadraticForm) -> DVector<f64> {
        self.check(p);
        self.gradient_vec(&p.vec())
    }

    pub(crate) fn gradient_vec(&self, p: &DVector<f64>) -> DVector<f64> {
        (&self.gram * p + &self.linear) * 2.0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn objective(prob: &ZubovProblem, p: &QuadraticForm) -> f64 {
    prob.objective(p)
}

pub fn gradient(prob: &ZubovProblem, p: &QuadraticForm) -> DVector<f64> {
    prob.gradient(p)
}

/// Snapshots on which `V(x) = xᵀP*x` satisfies the Zubov equation exactly.
///
/// States are drawn uniformly from `[-radius, radius]^n`. Each derivative is
/// `ẋ = αx + w` with `α = −h(1 − V)/(2V)` fixing the radial part and `w`
/// a random direction with `wᵀP*x = 0`, which leaves the residual at zero.
pub fn exact_zubov_snapshots(
    p_star: &QuadraticForm,
    q: &QuadraticForm,
    count: usize,
    radius: f64,
    seed: u64,
) -> SnapshotSet {
    let n = p_star.dim();
    let mut rng = seeded_rng(seed, 0);
    let mut states = Vec::with_capacity(n * count);
    let mut derivs = Vec::with_capacity(n * count);
    let pm = p_star.matrix();
    while states.len() < n * count {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-radius..=radius)).collect();
        let v = p_star.value(&x);
        if v < 1e-6 {
            continue;
        }
        let h = q.value(&x);
        let alpha = -h * (1.0 - v) / (2.0 * v);
        let px = pm * DVector::from_column_slice(&x);
        let r = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
        let w = &r - &px * (r.dot(&px) / px.norm_squared());
        let tangential = rng.random_range(-1.0..=1.0);
        states.extend_from_slice(&x);
        derivs.extend(x.iter().zip(w.iter()).map(|(xi, wi)| alpha * xi + tangential * wi));
    }
    SnapshotSet {
        times: vec![0.0; count],
        states: DMatrix::from_vec(n, count, states),
        derivs: DMatrix::from_vec(n, count, derivs),
    }
}

mod row_major {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }
}

mod column {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::kron_pow;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_snapshots(n: usize, count: usize, seed: u64) -> SnapshotSet {
        let mut rng = seeded_rng(seed, 99);
        let states = DMatrix::from_fn(n, count, |_, _| rng.random_range(-2.0..2.0));
        let derivs = DMatrix::from_fn(n, count, |_, _| rng.random_range(-2.0..2.0));
        SnapshotSet::new(vec![0.0; count], states, derivs).unwrap()
    }

    fn random_spd(n: usize, seed: u64) -> QuadraticForm {
        let mut rng = seeded_rng(seed, 98);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        QuadraticForm::symmetric_part(&(&a * a.transpose() + DMatrix::identity(n, n) * 0.5))
    }

    #[test]
    fn residual_vanishes_at_origin() {
        let p = random_spd(3, 1);
        let q = QuadraticForm::scaled_identity(3, 2.0);
        assert_eq!(residual(&p, &q, &[0.0; 3], &[1.0, -4.0, 2.0]), 0.0);
    }

    #[test]
    fn residual_scalar_example() {
        let p = QuadraticForm::from_symmetric(DMatrix::from_element(1, 1, 0.5)).unwrap();
        let q = QuadraticForm::scaled_identity(1, 1.0);
        assert_eq!(residual(&p, &q, &[2.0], &[-2.0]), -8.0);
    }

    #[test]
    fn residual_zero_on_radial_construction() {
        let p = random_spd(3, 2);
        let q = QuadraticForm::scaled_identity(3, 1.5);
        let x = [0.3, -0.7, 1.1];
        let (v, h) = (p.value(&x), q.value(&x));
        let scale = -h * (1.0 - v) / (2.0 * v);
        let xdot: Vec<f64> = x.iter().map(|xi| scale * xi).collect();
        assert!(residual(&p, &q, &x, &xdot).abs() < 1e-12);
    }

    #[test]
    fn synthetic_snapshots_have_zero_residual() {
        let p = random_spd(4, 3);
        let q = QuadraticForm::scaled_identity(4, 0.7);
        let set = exact_zubov_snapshots(&p, &q, 100, 1.5, 4);
        for (x, xdot) in set.iter() {
            let r = residual(&p, &q, x, xdot);
            assert!(r.abs() < 1e-11 * (1.0 + q.value(x)), "residual {r}");
        }
    }

    #[test]
    fn factored_residual_matches_direct() {
        let data = random_snapshots(3, 200, 5);
        let q = QuadraticForm::scaled_identity(3, 0.8);
        let p = random_spd(3, 6);
        let pv = p.vec();
        for (x, xdot) in data.iter() {
            let b = q.value(x);
            let a = x_circledast(x, xdot) - kron(x, x) * b;
            let factored = pv.dot(&a) + b;
            let direct = residual(&p, &q, x, xdot);
            assert_relative_eq!(factored, direct, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn quartic_term_factors() {
        let data = random_snapshots(3, 20, 7);
        let q = random_spd(3, 8);
        let p = random_spd(3, 9);
        let qp = kron(q.vec().as_slice(), p.vec().as_slice());
        for (x, _) in data.iter() {
            let full = qp.dot(&kron_pow(x, 4));
            assert_relative_eq!(full, q.value(x) * p.value(x), max_relative = 1e-12);
        }
    }

    #[test]
    fn objective_is_mean_squared_residual() {
        let data = random_snapshots(3, 1500, 10);
        let q = QuadraticForm::scaled_identity(3, 1.2);
        let prob = assemble(&data, &q).unwrap();
        for seed in 0..5 {
            let p = random_spd(3, 20 + seed);
            let direct =
                data.iter().map(|(x, xd)| residual(&p, &q, x, xd).powi(2)).sum::<f64>() / data.len() as f64;
            assert_relative_eq!(prob.objective(&p), direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn zero_states_give_zero_problem() {
        let data = SnapshotSet::new(
            vec![0.0; 4],
            DMatrix::zeros(2, 4),
            DMatrix::from_element(2, 4, 3.0),
        )
        .unwrap();
        let prob = assemble(&data, &QuadraticForm::scaled_identity(2, 1.0)).unwrap();
        assert!(prob.gram.iter().all(|&v| v == 0.0));
        assert!(prob.linear.iter().all(|&v| v == 0.0));
        assert_eq!(prob.constant, 0.0);
    }

    #[test]
    fn empty_data_is_rejected() {
        let err = assemble(&SnapshotSet::empty(2), &QuadraticForm::scaled_identity(2, 1.0));
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn objective_at_zero_is_constant_and_scales() {
        let data = random_snapshots(2, 50, 11);
        let zero = QuadraticForm::scaled_identity(2, 0.0);
        let prob = assemble(&data, &QuadraticForm::scaled_identity(2, 1.0)).unwrap();
        assert_eq!(prob.objective(&zero), prob.constant);
        // b = γ|x|², so doubling γ doubles every b
        let doubled = assemble(&data, &QuadraticForm::scaled_identity(2, 2.0)).unwrap();
        assert_relative_eq!(doubled.objective(&zero), 4.0 * prob.objective(&zero), max_relative = 1e-12);
    }

    #[test]
    fn objective_vanishes_on_exact_data() {
        let p = random_spd(3, 12);
        let q = QuadraticForm::scaled_identity(3, 1.0);
        let prob = assemble(&exact_zubov_snapshots(&p, &q, 300, 1.0, 13), &q).unwrap();
        assert!(prob.objective(&p).abs() < 1e-10);
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let prob = assemble(&random_snapshots(3, 3000, 14), &QuadraticForm::scaled_identity(3, 0.3)).unwrap();
        let eig = SymmetricEigen::new(prob.gram.clone()).eigenvalues;
        assert!(eig.min() >= -1e-10 * eig.amax());
        assert_eq!(prob.gram, prob.gram.transpose());
    }

    #[test]
    fn objective_ignores_antisymmetric_part() {
        let data = random_snapshots(3, 80, 15);
        let prob = assemble(&data, &QuadraticForm::scaled_identity(3, 0.5)).unwrap();
        let p = random_spd(3, 16);
        let mut skewed = p.matrix().clone();
        skewed[(0, 2)] += 0.4;
        skewed[(2, 0)] -= 0.4;
        let skewed_obj = prob.objective_vec(&DVector::from_column_slice(skewed.as_slice()));
        assert_relative_eq!(skewed_obj, prob.objective(&p), max_relative = 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..5 {
            let prob = assemble(&random_snapshots(2, 40, 30 + seed), &QuadraticForm::scaled_identity(2, 1.0))
                .unwrap();
            let p = random_spd(2, 40 + seed).vec();
            let grad = prob.gradient_vec(&p);
            let h = 1e-5;
            for k in 0..4 {
                let mut up = p.clone();
                up[k] += h;
                let mut down = p.clone();
                down[k] -= h;
                let fd = (prob.objective_vec(&up) - prob.objective_vec(&down)) / (2.0 * h);
                assert_relative_eq!(grad[k], fd, max_relative = 1e-6, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_unconstrained_minimizer() {
        let prob = assemble(&random_snapshots(2, 60, 50), &QuadraticForm::scaled_identity(2, 1.0)).unwrap();
        // restrict to the symmetric subspace where G is invertible
        let basis = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let reduced = basis.transpose() * &prob.gram * &basis;
        let rhs = -(basis.transpose() * &prob.linear);
        let coords = reduced.lu().solve(&rhs).unwrap();
        let p = &basis * coords;
        assert!(prob.gradient_vec(&p).norm() <= 1e-8 * prob.linear.norm());
    }

    #[test]
    fn zero_problem_has_zero_gradient() {
        let prob = ZubovProblem {
            dim: 2,
            count: 1,
            gram: DMatrix::zeros(4, 4),
            linear: DVector::zeros(4),
            constant: 0.0,
        };
        assert!(prob.gradient(&random_spd(2, 1)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assembly_is_order_independent() {
        let data = random_snapshots(2, 3000, 60);
        let q = QuadraticForm::scaled_identity(2, 1.0);
        let a = assemble(&data, &q).unwrap();
        let reversed: Vec<usize> = (0..data.len()).rev().collect();
        let shuffled = SnapshotSet::new(
            vec![0.0; data.len()],
            data.states.select_columns(&reversed),
            data.derivs.select_columns(&reversed),
        )
        .unwrap();
        let b = assemble(&shuffled, &q).unwrap();
        assert_relative_eq!(a.gram, b.gram, max_relative = 1e-12);
        assert_relative_eq!(a.constant, b.constant, max_relative = 1e-12);
    }

    #[test]
    fn quadratic_form_json_is_row_major() {
        let q = QuadraticForm::from_symmetric(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let json = serde_json::to_string(&q).unwrap();
        assert_eq!(json, "[[2.0,0.5],[0.5,1.0]]");
        assert_eq!(serde_json::from_str::<QuadraticForm>(&json).unwrap(), q);
        assert!(serde_json::from_str::<QuadraticForm>("[[1.0,2.0],[0.0,1.0]]").is_err());
    }

    #[test]
    fn problem_json_round_trip() {
        let prob = assemble(&random_snapshots(2, 10, 70), &QuadraticForm::scaled_identity(2, 1.0)).unwrap();
        let back: ZubovProblem = serde_json::from_str(&prob.to_json().unwrap()).unwrap();
        assert_eq!(back, prob);
    }
}
