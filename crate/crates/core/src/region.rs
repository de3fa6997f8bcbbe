//! Sublevel-set estimation and validation.
//!
//! Given `V(x) = xᵀPx`, the certified estimate is the ellipsoid
//! `{V ≤ c*}` where `c*` is the largest level found by sampling such that no
//! sample inside it has `V̇ ≥ 0`. The level is also capped so that the
//! ellipsoid stays inside the sampled box.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_f64, Region, SnapshotSet};
use crate::dynamics::{integrate_to, SystemModel};
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::solver::{solve, SolverConfig};
use crate::zubov::{assemble, QuadraticForm};

const STREAM_MONTE_CARLO: u64 = 100;
const STREAM_BOUNDARY: u64 = 200;
/// Shrink applied to the smallest violating level so the sublevel
/// inequality is strict.
const SAFETY_SHRINK: f64 = 1.0 - 1e-6;
const MC_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    /// Samples per estimate (per plane in subsystem mode).
    pub num_samples: usize,
    pub seed: u64,
    /// Samples closer than this to the origin are skipped.
    pub origin_exclusion: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            num_samples: 200_000,
            seed: 0,
            origin_exclusion: 1e-8,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 1000 {
            return Err(Error::Config(format!("need at least 1000 Monte Carlo samples, got {}", self.num_samples)));
        }
        if !(self.origin_exclusion > 0.0) {
            return Err(Error::Config("origin exclusion radius must be positive".into()));
        }
        Ok(())
    }
}

/// `V̇(x) = 2xᵀPf(x)`.
pub fn vdot(p: &QuadraticForm, x: &[f64], model: &SystemModel) -> f64 {
    2.0 * p.bilinear(x, &model.eval(x))
}

/// Largest `c` with `{xᵀPx ≤ c}` inside the box: the ellipsoid's extent
/// along axis `i` is `sqrt(c (P⁻¹)_ii)`.
pub fn region_cap(p: &QuadraticForm, region: &Region) -> Result<f64> {
    if p.dim() != region.dim() {
        return Err(Error::Shape { expected: region.dim(), got: p.dim() });
    }
    let inv = p
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(p.min_eigenvalue()))?
        .inverse();
    Ok((0..p.dim())
        .map(|i| {
            let half = region.lower[i].abs().min(region.upper[i]);
            half * half / inv[(i, i)]
        })
        .fold(f64::INFINITY, f64::min))
}

/// Result of one Monte Carlo level search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SublevelEstimate {
    pub c_star: f64,
    pub violations_found: bool,
    pub capped_by_region: bool,
    pub violating_samples: usize,
}

/// Uniform samples of the box, one per column, drawn sequentially so a
/// larger count extends a smaller one.
pub fn monte_carlo_samples(region: &Region, count: usize, seed: u64, stream: u64) -> DMatrix<f64> {
    let mut rng = seeded_rng(seed, STREAM_MONTE_CARLO + stream);
    let n = region.dim();
    let mut data = Vec::with_capacity(n * count);
    for _ in 0..count {
        data.extend(region.sample(&mut rng));
    }
    DMatrix::from_vec(n, count, data)
}

fn require_pd(p: &QuadraticForm) -> Result<()> {
    p.require_positive_definite()
}

/// Samples on the coordinate subspace spanned by `axes` (all other
/// coordinates zero).
fn estimate_on_axes(
    p: &QuadraticForm,
    model: &SystemModel,
    region: &Region,
    axes: &[usize],
    mc: &McConfig,
    stream: u64,
) -> Result<SublevelEstimate> {
    mc.validate()?;
    let n = p.dim();
    if model.dim() != n || region.dim() != n {
        return Err(Error::Shape { expected: n, got: model.dim().max(region.dim()) });
    }
    require_pd(p)?;
    let sub_region = region.slice(axes)?;
    let sub_p = p.restrict(axes);
    let cap = region_cap(&sub_p, &sub_region)?;
    let samples = monte_carlo_samples(&sub_region, mc.num_samples, mc.seed, stream);
    let k = axes.len();
    let exclusion_sq = mc.origin_exclusion * mc.origin_exclusion;

    let chunks: Vec<(f64, usize)> = samples
        .as_slice()
        .par_chunks(MC_CHUNK * k)
        .map(|chunk| {
            let mut full = vec![0.0; n];
            let mut lowest = f64::INFINITY;
            let mut count = 0;
            for local in chunk.chunks_exact(k) {
                if local.iter().map(|v| v * v).sum::<f64>() < exclusion_sq {
                    continue;
                }
                for (&a, &v) in axes.iter().zip(local) {
                    full[a] = v;
                }
                let vd = vdot(p, &full, model);
                // NaN counts as a violation
                if !(vd < 0.0) {
                    count += 1;
                    lowest = lowest.min(sub_p.value(local));
                }
            }
            (lowest, count)
        })
        .collect();

    let (lowest, violating_samples) =
        chunks.iter().fold((f64::INFINITY, 0), |(l, c), &(cl, cc)| (l.min(cl), c + cc));
    let violations_found = violating_samples > 0;
    let from_violations = SAFETY_SHRINK * lowest;
    let capped_by_region = !violations_found || cap <= from_violations;
    Ok(SublevelEstimate {
        c_star: if capped_by_region { cap } else { from_violations },
        violations_found,
        capped_by_region,
        violating_samples,
    })
}

/// Monte Carlo estimate of the largest certified level `c*` over the box.
pub fn estimate_c_star(
    p: &QuadraticForm,
    model: &SystemModel,
    region: &Region,
    mc: &McConfig,
) -> Result<SublevelEstimate> {
    let axes: Vec<usize> = (0..p.dim()).collect();
    estimate_on_axes(p, model, region, &axes, mc, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneEstimate {
    pub axes: [usize; 2],
    #[serde(flatten)]
    pub estimate: SublevelEstimate,
}

/// Per-plane levels and the most conservative one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsystemEstimate {
    pub c_star: f64,
    pub planes: Vec<PlaneEstimate>,
}

impl SubsystemEstimate {
    pub fn binding(&self) -> &PlaneEstimate {
        self.planes
            .iter()
            .min_by(|a, b| a.estimate.c_star.total_cmp(&b.estimate.c_star))
            .expect("at least one plane")
    }
}

/// Runs the level search separately in each coordinate plane (other
/// coordinates held at zero) and keeps the smallest level.
pub fn estimate_c_star_subsystems(
    p: &QuadraticForm,
    model: &SystemModel,
    region: &Region,
    planes: &[[usize; 2]],
    mc: &McConfig,
) -> Result<SubsystemEstimate> {
    if planes.is_empty() {
        return Err(Error::Config("subsystem estimation needs at least one plane".into()));
    }
    let mut seen = vec![false; p.dim()];
    for &[a, b] in planes {
        if a == b || a >= p.dim() || b >= p.dim() || seen[a] || seen[b] {
            return Err(Error::Config(format!("planes must be disjoint coordinate pairs, bad pair ({a}, {b})")));
        }
        seen[a] = true;
        seen[b] = true;
    }
    let planes = planes
        .iter()
        .enumerate()
        .map(|(k, axes)| {
            Ok(PlaneEstimate {
                axes: *axes,
                estimate: estimate_on_axes(p, model, region, axes, mc, k as u64)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let c_star = planes.iter().map(|pl| pl.estimate.c_star).fold(f64::INFINITY, f64::min);
    Ok(SubsystemEstimate { c_star, planes })
}

/// Volume of the unit ball in `R^n`.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / n as f64 * unit_ball_volume(n - 2),
    }
}

/// Volume of `{xᵀPx ≤ c}`.
pub fn ellipsoid_volume(p: &QuadraticForm, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::Config(format!("sublevel constant must be positive, got {c}")));
    }
    let chol = p
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(p.min_eigenvalue()))?;
    // sqrt(det P) = prod diag(L)
    let sqrt_det: f64 = chol.l_dirty().diagonal().iter().product();
    let n = p.dim();
    Ok(unit_ball_volume(n) * c.powf(n as f64 / 2.0) / sqrt_det)
}

/// How `c*` is searched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevelSearch {
    /// Uniform samples over the whole box.
    Full,
    /// One search per coordinate plane; the minimum is reported.
    Subsystems { planes: Vec<[usize; 2]> },
}

/// Inferred Lyapunov matrix together with its certified ellipsoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    #[serde(rename = "P")]
    pub p: QuadraticForm,
    pub gamma: f64,
    pub c_star: f64,
    pub volume: f64,
    pub violations_found: bool,
    pub capped_by_region: bool,
    pub containment_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planes: Option<Vec<PlaneEstimate>>,
}

impl StabilityEstimate {
    pub fn contains(&self, x: &[f64]) -> bool {
        self.p.value(x) <= self.c_star
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Level search plus volume for an inferred `P`.
pub fn estimate_stability(
    p: QuadraticForm,
    gamma: f64,
    model: &SystemModel,
    region: &Region,
    search: &LevelSearch,
    mc: &McConfig,
) -> Result<StabilityEstimate> {
    let (level, planes) = match search {
        LevelSearch::Full => (estimate_c_star(&p, model, region, mc)?, None),
        LevelSearch::Subsystems { planes } => {
            let sub = estimate_c_star_subsystems(&p, model, region, planes, mc)?;
            (sub.binding().estimate, Some(sub.planes))
        }
    };
    let volume = ellipsoid_volume(&p, level.c_star)?;
    Ok(StabilityEstimate {
        p,
        gamma,
        c_star: level.c_star,
        volume,
        violations_found: level.violations_found,
        capped_by_region: level.capped_by_region,
        containment_fraction: None,
        planes,
    })
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64)).collect()
}

/// Twenty log-spaced values in `[1e-3, 10]`.
pub fn default_gamma_grid() -> Vec<f64> {
    log_grid(1e-3, 10.0, 20)
}

/// One row of a γ sweep. `error` is set when that γ produced no estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub objective: f64,
    pub min_eigenvalue: f64,
    pub c_star: f64,
    pub volume: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub best: StabilityEstimate,
    pub rows: Vec<SweepRow>,
}

/// Infers `P` for `Q = γI`, then estimates its certified ellipsoid.
pub fn infer_and_estimate(
    data: &SnapshotSet,
    model: &SystemModel,
    region: &Region,
    gamma: f64,
    solver: &SolverConfig,
    search: &LevelSearch,
    mc: &McConfig,
) -> Result<(StabilityEstimate, f64)> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be positive and finite, got {gamma}")));
    }
    let prob = assemble(data, &QuadraticForm::scaled_identity(data.dim(), gamma))?;
    let (p, report) = solve(&prob, solver)?;
    let est = estimate_stability(p, gamma, model, region, search, mc)?;
    Ok((est, report.final_objective))
}

/// Runs the full inference for each γ and keeps the largest-volume
/// estimate; ties go to the smaller γ.
pub fn sweep_gamma(
    data: &SnapshotSet,
    model: &SystemModel,
    region: &Region,
    gammas: &[f64],
    solver: &SolverConfig,
    search: &LevelSearch,
    mc: &McConfig,
) -> Result<SweepOutcome> {
    if gammas.is_empty() {
        return Err(Error::Config("gamma list is empty".into()));
    }
    let results: Vec<Result<(StabilityEstimate, f64)>> = gammas
        .par_iter()
        .map(|&g| infer_and_estimate(data, model, region, g, solver, search, mc))
        .collect();

    let mut rows = Vec::with_capacity(gammas.len());
    let mut best: Option<StabilityEstimate> = None;
    let mut order: Vec<usize> = (0..gammas.len()).collect();
    order.sort_by(|&a, &b| gammas[a].total_cmp(&gammas[b]));
    for (&gamma, result) in gammas.iter().zip(&results) {
        rows.push(match result {
            Ok((est, objective)) => SweepRow {
                gamma,
                objective: *objective,
                min_eigenvalue: est.p.min_eigenvalue(),
                c_star: est.c_star,
                volume: est.volume,
                error: None,
            },
            Err(e) => SweepRow {
                gamma,
                objective: f64::NAN,
                min_eigenvalue: f64::NAN,
                c_star: f64::NAN,
                volume: f64::NAN,
                error: Some(e.to_string()),
            },
        });
    }
    for i in order {
        if let Ok((est, _)) = &results[i] {
            if best.as_ref().is_none_or(|b| est.volume > b.volume) {
                best = Some(est.clone());
            }
        }
    }
    let best = best.ok_or_else(|| {
        let reasons: Vec<String> = rows.iter().filter_map(|r| r.error.clone()).collect();
        Error::Numeric(format!("no gamma produced a valid estimate: {}", reasons.join("; ")))
    })?;
    Ok(SweepOutcome { best, rows })
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["gamma", "objective", "min_eigenvalue", "c_star", "volume", "error"])?;
    for r in rows {
        w.write_record([
            format_f64(r.gamma),
            format_f64(r.objective),
            format_f64(r.min_eigenvalue),
            format_f64(r.c_star),
            format_f64(r.volume),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Brute-force stability-region oracle on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RoaGrid {
    pub resolution: usize,
    pub region: Region,
    /// Node flags, axis 0 varying fastest.
    pub converged: Vec<bool>,
    pub t_final: f64,
    pub conv_tol: f64,
}

impl RoaGrid {
    pub fn len(&self) -> usize {
        self.converged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.converged.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.region.dim()
    }

    pub fn node(&self, index: usize) -> Vec<f64> {
        grid_node(&self.region, self.resolution, index)
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.region.upper[axis] - self.region.lower[axis]) / (self.resolution - 1) as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn converged_count(&self) -> usize {
        self.converged.iter().filter(|&&c| c).count()
    }

    /// Area (volume) of the converged set, one cell per converged node.
    pub fn converged_volume(&self) -> f64 {
        self.converged_count() as f64 * self.cell_volume()
    }

    /// Nodes inside `{xᵀPx ≤ c}` that did not converge.
    pub fn violations(&self, p: &QuadraticForm, c: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.converged[i] && p.value(&self.node(i)) <= c)
            .collect()
    }

    /// Index of the node nearest to the origin.
    pub fn origin_index(&self) -> usize {
        let mut index = 0;
        let mut stride = 1;
        for a in 0..self.dim() {
            let k = (-self.region.lower[a] / self.spacing(a)).round() as usize;
            index += k.min(self.resolution - 1) * stride;
            stride *= self.resolution;
        }
        index
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header: Vec<String> = (1..=self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},converged", header.join(","))?;
        for (i, &c) in self.converged.iter().enumerate() {
            let coords: Vec<String> = self.node(i).into_iter().map(format_f64).collect();
            writeln!(w, "{},{}", coords.join(","), u8::from(c))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn grid_node(region: &Region, resolution: usize, mut index: usize) -> Vec<f64> {
    (0..region.dim())
        .map(|a| {
            let k = index % resolution;
            index /= resolution;
            let (lo, hi) = (region.lower[a], region.upper[a]);
            lo + (hi - lo) * k as f64 / (resolution - 1) as f64
        })
        .collect()
}

/// `true` if the trajectory from `x0` stays finite and ends within
/// `conv_tol` of the origin after `t_final`.
pub fn converges(model: &SystemModel, x0: &[f64], dt: f64, t_final: f64, conv_tol: f64) -> bool {
    integrate_to(model, x0, dt, t_final)
        .is_some_and(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt() < conv_tol)
}

/// Simulates from every node of a `resolution^n` grid over the region.
pub fn true_roa_grid(
    model: &SystemModel,
    region: &Region,
    resolution: usize,
    dt: f64,
    t_final: f64,
    conv_tol: f64,
) -> Result<RoaGrid> {
    let n = region.dim();
    if n > 3 {
        return Err(Error::Config(format!("grid oracle supports n <= 3, got {n}")));
    }
    if resolution < 11 {
        return Err(Error::Config(format!("grid resolution must be at least 11, got {resolution}")));
    }
    if model.dim() != n {
        return Err(Error::Shape { expected: n, got: model.dim() });
    }
    let total = resolution.pow(n as u32);
    let converged = (0..total)
        .into_par_iter()
        .map(|i| converges(model, &grid_node(region, resolution, i), dt, t_final, conv_tol))
        .collect();
    Ok(RoaGrid {
        resolution,
        region: region.clone(),
        converged,
        t_final,
        conv_tol,
    })
}

/// `P^{-1/2}` of a positive definite form.
fn inverse_sqrt(p: &QuadraticForm) -> Result<DMatrix<f64>> {
    p.require_positive_definite()?;
    let eig = SymmetricEigen::new(p.matrix().clone());
    let scales = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&scales) * eig.eigenvectors.transpose())
}

/// Uniformly oriented points on `{xᵀPx = c}`: Gaussian directions
/// normalized to the unit sphere and mapped through `sqrt(c) P^{-1/2}`.
pub fn ellipsoid_surface_samples(p: &QuadraticForm, c: f64, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let map = inverse_sqrt(p)? * c.sqrt();
    let n = p.dim();
    let mut rng = seeded_rng(seed, STREAM_BOUNDARY);
    Ok((0..count)
        .map(|_| {
            let mut u = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            u.normalize_mut();
            (&map * u).as_slice().to_vec()
        })
        .collect())
}

/// Fraction of ellipsoid-surface samples whose trajectories converge.
pub fn validate_containment(
    est: &StabilityEstimate,
    model: &SystemModel,
    num_boundary: usize,
    dt: f64,
    t_final: f64,
    conv_tol: f64,
    seed: u64,
) -> Result<f64> {
    if !(est.c_star > 0.0) {
        return Err(Error::Config("estimate has a non-positive sublevel constant".into()));
    }
    if num_boundary == 0 {
        return Err(Error::Config("need at least one boundary sample".into()));
    }
    let points = ellipsoid_surface_samples(&est.p, est.c_star, num_boundary, seed)?;
    let hits = points
        .par_iter()
        .filter(|x| converges(model, x, dt, t_final, conv_tol))
        .count();
    Ok(hits as f64 / num_boundary as f64)
}

/// Boundary of the slice `{x : xᵀPx = c, x_j = 0 for j ∉ axes}` at
/// `count` equally spaced angles; rows are `(θ, x_a, x_b)`.
pub fn ellipse_boundary(p: &QuadraticForm, c: f64, axes: [usize; 2], count: usize) -> Result<Vec<[f64; 3]>> {
    let map = inverse_sqrt(&p.restrict(&axes))? * c.sqrt();
    Ok((0..count)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / count as f64;
            let x = &map * DVector::from_column_slice(&[theta.cos(), theta.sin()]);
            [theta, x[0], x[1]]
        })
        .collect())
}

pub fn write_ellipse_csv(points: &[[f64; 3]], axes: [usize; 2], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "theta,x{},x{}", axes[0] + 1, axes[1] + 1)?;
    for pt in points {
        writeln!(w, "{},{},{}", format_f64(pt[0]), format_f64(pt[1]), format_f64(pt[2]))?;
    }
    w.flush()?;
    Ok(())
}
