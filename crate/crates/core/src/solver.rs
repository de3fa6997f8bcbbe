//! Projected-gradient solver for the PSD-constrained Zubov least squares.
//!
//! The feasible set is `{P = Pᵀ : λ_min(P) ≥ ε}`; the Euclidean projection
//! onto it clamps the spectrum of the symmetric part from below.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::zubov::{QuadraticForm, ZubovProblem};

const STREAM_POWER_ITERATION: u64 = 17;
/// Consecutive sub-tolerance iterations required to declare convergence.
const STALL_WINDOW: usize = 10;
const HISTORY_EXPORT_LEN: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Relative objective decrease below which an iteration counts as stalled.
    pub tol: f64,
    /// Eigenvalue floor.
    pub eps_diag: f64,
    /// Nesterov acceleration with function-value restart.
    pub accel: bool,
    /// Multiplier on the `1/L` step.
    pub step_safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 50_000,
            tol: 1e-10,
            eps_diag: 1e-6,
            accel: true,
            step_safety: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_diag > 0.0) || !(self.tol > 0.0) || self.max_iters < 1 {
            return Err(Error::Config(format!(
                "solver needs eps_diag > 0, tol > 0 and max_iters >= 1 (got {}, {}, {})",
                self.eps_diag, self.tol, self.max_iters
            )));
        }
        if !(self.step_safety > 0.0 && self.step_safety <= 1.0) {
            return Err(Error::Config(format!("step_safety must lie in (0, 1], got {}", self.step_safety)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Objective of every accepted iterate, starting with the warm start.
    #[serde(serialize_with = "serialize_downsampled")]
    pub objective_history: Vec<f64>,
    pub converged: bool,
    /// Set when a plain projected-gradient step failed to decrease the
    /// objective by more than rounding.
    pub stagnated: bool,
    pub restarts: usize,
    pub lipschitz: f64,
    pub min_eigenvalue: f64,
}

impl SolveReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evenly spaced subsample of at most `max_len` entries that keeps both ends.
pub fn downsample(values: &[f64], max_len: usize) -> Vec<f64> {
    if values.len() <= max_len || max_len < 2 {
        return values.to_vec();
    }
    let last = values.len() - 1;
    (0..max_len)
        .map(|k| values[(k * last + (max_len - 1) / 2) / (max_len - 1)])
        .collect()
}

fn serialize_downsampled<S: serde::Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(downsample(v, HISTORY_EXPORT_LEN))
}

/// Projects onto `{P = Pᵀ : λ_min(P) ≥ eps}` in the Frobenius norm.
pub fn project_psd_floor(s: &DMatrix<f64>, eps: f64) -> Result<QuadraticForm> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eigenvalue floor must be positive, got {eps}")));
    }
    if !s.is_square() {
        return Err(Error::Shape { expected: s.nrows(), got: s.ncols() });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cannot project a matrix with non-finite entries".into()));
    }
    let sym = (s + s.transpose()) * 0.5;
    let SymmetricEigen { eigenvectors, mut eigenvalues } = SymmetricEigen::new(sym.clone());
    if eigenvalues.iter().all(|&l| l >= eps) {
        return Ok(QuadraticForm::symmetric_part(&sym));
    }
    eigenvalues.apply(|l| *l = l.max(eps));
    let scaled = &eigenvectors * DMatrix::from_diagonal(&eigenvalues);
    let mut out = QuadraticForm::symmetric_part(&(scaled * eigenvectors.transpose())).matrix().clone();
    // reconstruction rounding can leave the smallest eigenvalue a few ulps under the floor
    let lmin = SymmetricEigen::new(out.clone()).eigenvalues.min();
    if lmin < eps {
        let shift = (eps - lmin) + 4.0 * f64::EPSILON * out.amax();
        for i in 0..out.nrows() {
            out[(i, i)] += shift;
        }
    }
    Ok(QuadraticForm::symmetric_part(&out))
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn spectral_norm(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut rng = seeded_rng(0, STREAM_POWER_ITERATION);
    let mut v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let w = g * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - lambda).abs() <= 1e-8 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Minimizer of `pᵀGp + 2gᵀp` with a small ridge, used as a warm start.
fn normal_equation_solution(prob: &ZubovProblem) -> DVector<f64> {
    let m = prob.gram.nrows();
    let ridge = 1e-12 * prob.gram.trace() / m as f64;
    if !(ridge > 0.0) {
        return DVector::zeros(m);
    }
    let regularized = &prob.gram + DMatrix::identity(m, m) * ridge;
    let rhs = -&prob.linear;
    if let Some(chol) = regularized.clone().cholesky() {
        return chol.solve(&rhs);
    }
    // Rounding can push tiny eigenvalues below the ridge; fall back to a
    // truncated eigen-solve.
    let eig = SymmetricEigen::new(regularized);
    let cutoff = 1e-12 * eig.eigenvalues.amax();
    let mut p = DVector::zeros(m);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cutoff {
            let u = eig.eigenvectors.column(k);
            p += u * (u.dot(&rhs) / l);
        }
    }
    p
}

/// Minimizes the mean squared Zubov residual over `λ_min(P) ≥ eps_diag`.
pub fn solve(prob: &ZubovProblem, config: &SolverConfig) -> Result<(QuadraticForm, SolveReport)> {
    config.validate()?;
    if prob.gram.iter().chain(prob.linear.iter()).any(|v| !v.is_finite()) || !prob.constant.is_finite() {
        return Err(Error::Numeric("Zubov problem has non-finite entries".into()));
    }
    let n = prob.dim;
    let eps = config.eps_diag;
    let objective = |p: &QuadraticForm| prob.objective_vec(&p.vec());

    let warm = normal_equation_solution(prob);
    let start = project_psd_floor(&DMatrix::from_column_slice(n, n, warm.as_slice()), eps)?;
    let initial_objective = objective(&start);
    let lipschitz = 2.0 * spectral_norm(&prob.gram);

    let mut report = SolveReport {
        iterations: 0,
        initial_objective,
        final_objective: initial_objective,
        objective_history: vec![initial_objective],
        converged: false,
        stagnated: false,
        restarts: 0,
        lipschitz,
        min_eigenvalue: 0.0,
    };
    if lipschitz == 0.0 {
        report.converged = true;
        report.min_eigenvalue = start.min_eigenvalue();
        return Ok((start, report));
    }
    let step = config.step_safety / lipschitz;

    let projected_step = |from: &DMatrix<f64>| -> Result<QuadraticForm> {
        let grad = prob.gradient_vec(&DVector::from_column_slice(from.as_slice()));
        let moved = from - DMatrix::from_column_slice(n, n, grad.as_slice()) * step;
        project_psd_floor(&moved, eps)
    };

    let mut current = start;
    let mut current_obj = initial_objective;
    let mut momentum_point = current.matrix().clone();
    let mut t = 1.0f64;
    let mut stalled = 0;

    for iter in 1..=config.max_iters {
        report.iterations = iter;
        let mut next = projected_step(&momentum_point)?;
        let mut next_obj = objective(&next);

        if config.accel && next_obj > current_obj {
            report.restarts += 1;
            t = 1.0;
            next = projected_step(current.matrix())?;
            next_obj = objective(&next);
        }

        // Evaluating pᵀGp + 2gᵀp + c0 near its minimum cancels terms of size
        // c0, so changes below this are rounding.
        let noise = 1e-12 * (prob.constant.abs() + current_obj.abs());
        if next_obj > current_obj {
            // A 1/L projected step cannot increase a convex L-smooth
            // objective, so anything beyond rounding means the step is off.
            if next_obj - current_obj > noise {
                report.stagnated = true;
                break;
            }
            stalled += 1;
            momentum_point = current.matrix().clone();
            if stalled >= STALL_WINDOW {
                report.converged = true;
                break;
            }
            continue;
        }

        let decrease = current_obj - next_obj;
        if decrease < config.tol * current_obj.abs() || decrease <= noise {
            stalled += 1;
        } else {
            stalled = 0;
        }

        if config.accel {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            momentum_point = next.matrix() + (next.matrix() - current.matrix()) * beta;
            t = t_next;
        } else {
            momentum_point = next.matrix().clone();
        }
        current = next;
        current_obj = next_obj;
        report.objective_history.push(current_obj);

        if stalled >= STALL_WINDOW {
            report.converged = true;
            break;
        }
    }

    report.final_objective = current_obj;
    report.min_eigenvalue = current.min_eigenvalue();
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SnapshotSet;
    use crate::zubov::{assemble, exact_zubov_snapshots};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn sym(rows: &[f64], n: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, n, rows)
    }

    #[test]
    fn projection_clamps_diagonal() {
        let p = project_psd_floor(&sym(&[2.0, 0.0, 0.0, -1.0], 2), 1e-6).unwrap();
        assert_relative_eq!(*p.matrix(), sym(&[2.0, 0.0, 0.0, 1e-6], 2), epsilon = 1e-15);
    }

    #[test]
    fn projection_fixes_feasible_points() {
        let s = sym(&[3.0, 1.0, 1.0, 2.0], 2);
        let p = project_psd_floor(&s, 1e-6).unwrap();
        assert_relative_eq!(*p.matrix(), s, epsilon = 1e-12);
    }

    #[test]
    fn projection_of_antisymmetric_is_floor() {
        let p = project_psd_floor(&sym(&[0.0, 1.0, -1.0, 0.0], 2), 1e-6).unwrap();
        assert_relative_eq!(*p.matrix(), DMatrix::identity(2, 2) * 1e-6, epsilon = 1e-18);
    }

    #[test]
    fn projection_rejects_bad_input() {
        assert!(matches!(project_psd_floor(&sym(&[f64::NAN, 0.0, 0.0, 1.0], 2), 1e-6), Err(Error::Numeric(_))));
        assert!(matches!(project_psd_floor(&DMatrix::identity(2, 2), 0.0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_feasible(entries in prop::collection::vec(-5.0f64..5.0, 16)) {
            let s = DMatrix::from_column_slice(4, 4, &entries);
            let once = project_psd_floor(&s, 1e-3).unwrap();
            let twice = project_psd_floor(once.matrix(), 1e-3).unwrap();
            prop_assert!(once.min_eigenvalue() >= 1e-3 - 1e-12);
            prop_assert!((once.matrix() - twice.matrix()).amax() <= 1e-12);
        }
    }

    #[test]
    fn spectral_norm_examples() {
        assert_relative_eq!(spectral_norm(&sym(&[3.0, 0.0, 0.0, 1.0], 2)), 3.0, max_relative = 1e-7);
        assert_relative_eq!(spectral_norm(&DMatrix::identity(5, 5)), 1.0, max_relative = 1e-12);
        assert_eq!(spectral_norm(&DMatrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn spectral_norm_matches_eigensolver() {
        let mut rng = seeded_rng(5, 5);
        for _ in 0..5 {
            let a = DMatrix::from_fn(10, 10, |_, _| rng.random_range(-1.0..1.0));
            let g = &a * a.transpose();
            let want = SymmetricEigen::new(g.clone()).eigenvalues.max();
            assert_relative_eq!(spectral_norm(&g), want, max_relative = 1e-6);
        }
    }

    #[test]
    fn downsample_keeps_endpoints() {
        let v: Vec<f64> = (0..5000).map(f64::from).collect();
        let d = downsample(&v, 1000);
        assert_eq!(d.len(), 1000);
        assert_eq!(d[0], 0.0);
        assert_eq!(*d.last().unwrap(), 4999.0);
        assert!(d.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(downsample(&v[..10], 1000).len(), 10);
    }

    fn spd(rows: &[f64], n: usize) -> QuadraticForm {
        QuadraticForm::from_symmetric(sym(rows, n)).unwrap()
    }

    #[test]
    fn recovers_planted_lyapunov_matrix() {
        let p_star = spd(&[1.0, 0.3, 0.3, 0.6], 2);
        let q = QuadraticForm::scaled_identity(2, 1.0);
        let prob = assemble(&exact_zubov_snapshots(&p_star, &q, 200, 2.0, 1), &q).unwrap();
        let (p, report) = solve(&prob, &SolverConfig::default()).unwrap();
        let err = (p.matrix() - p_star.matrix()).norm() / p_star.matrix().norm();
        assert!(err <= 1e-3, "relative error {err}");
        assert!(report.final_objective <= 1e-8);
        assert!(report.converged);
    }

    #[test]
    fn constrained_solution_respects_floor() {
        // Data whose unconstrained fit is indefinite: a saddle vector field.
        let count = 400;
        let mut rng = seeded_rng(3, 3);
        let states = DMatrix::from_fn(2, count, |_, _| rng.random_range(-1.0..1.0));
        let mut derivs = states.clone();
        derivs.row_mut(0).scale_mut(-1.0);
        let data = SnapshotSet::new(vec![0.0; count], states, derivs).unwrap();
        let q = QuadraticForm::scaled_identity(2, 1.0);
        let prob = assemble(&data, &q).unwrap();
        let config = SolverConfig::default();
        let (p, report) = solve(&prob, &config).unwrap();
        assert!(report.min_eigenvalue >= config.eps_diag - 1e-12);
        assert!(report.final_objective <= report.initial_objective);
        assert!(report.objective_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(!report.stagnated);
        assert_eq!(report.final_objective, prob.objective(&p));
    }

    #[test]
    fn scalar_linear_system_matches_closed_form() {
        for gamma in [0.5, 1.0, 2.0] {
            let xs: Vec<f64> = (0..201).map(|i| -0.1 + 0.001 * i as f64).collect();
            let data = SnapshotSet::new(
                vec![0.0; xs.len()],
                DMatrix::from_row_slice(1, xs.len(), &xs),
                DMatrix::from_iterator(1, xs.len(), xs.iter().map(|x| -x)),
            )
            .unwrap();
            let q = QuadraticForm::scaled_identity(1, gamma);
            let (p, _) = solve(&assemble(&data, &q).unwrap(), &SolverConfig::default()).unwrap();
            let rel = (p.matrix()[(0, 0)] - gamma / 2.0).abs() / (gamma / 2.0);
            assert!(rel <= 0.05, "gamma {gamma}: relative deviation {rel}");
        }
    }

    #[test]
    fn zero_problem_returns_floor() {
        let prob = ZubovProblem {
            dim: 2,
            count: 1,
            gram: DMatrix::zeros(4, 4),
            linear: DVector::zeros(4),
            constant: 0.0,
        };
        let (p, report) = solve(&prob, &SolverConfig::default()).unwrap();
        assert_relative_eq!(*p.matrix(), DMatrix::identity(2, 2) * 1e-6);
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = SolverConfig { eps_diag: 0.0, ..SolverConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn report_json_downsamples_history() {
        let report = SolveReport {
            iterations: 3000,
            initial_objective: 1.0,
            final_objective: 0.5,
            objective_history: vec![1.0; 3001],
            converged: true,
            stagnated: false,
            restarts: 0,
            lipschitz: 2.0,
            min_eigenvalue: 1e-6,
        };
        let value: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(value["objective_history"].as_array().unwrap().len(), 1000);
    }
}
