//! End-to-end stages shared by the CLI subcommands and the test suites.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{DerivativeSource, RunConfig};
use crate::data::{concat, filter_to_region, finite_difference, SnapshotSet};
use crate::dynamics::{initial_conditions, simulate_many, Benchmark, NetworkedVdpParams, SystemModel, Trajectory};
use crate::error::{Error, Result};
use crate::region::{
    ellipse_boundary, estimate_stability, true_roa_grid, validate_containment, write_ellipse_csv, LevelSearch,
    RoaGrid, StabilityEstimate,
};
use crate::solver::{solve, SolveReport};
use crate::zubov::{assemble, QuadraticForm};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const P_FILE: &str = "P.json";
pub const REPORT_FILE: &str = "solve_report.json";
pub const ESTIMATE_FILE: &str = "estimate.json";
pub const VALIDATION_FILE: &str = "validation.json";
pub const GRID_FILE: &str = "roa_grid.csv";
pub const ELLIPSE_POINTS: usize = 720;

/// Simulates the configured initial conditions.
pub fn simulate_trajectories(config: &RunConfig) -> Result<(SystemModel, Vec<Trajectory>)> {
    let model = config.model();
    let ics = initial_conditions(&config.ic_scheme, config.num_ics, &config.region, config.seed)?;
    let trajs = simulate_many(&model, &ics, config.dt, config.tf)?;
    Ok((model, trajs))
}

/// Applies the configured derivative source, filters each trajectory to the
/// region and concatenates the survivors.
pub fn snapshots(config: &RunConfig, trajs: &[Trajectory]) -> Result<SnapshotSet> {
    let filtered = trajs
        .iter()
        .map(|t| {
            let t = match config.derivatives {
                DerivativeSource::Solver => t.clone(),
                DerivativeSource::FiniteDifference => {
                    let mut t = t.clone();
                    t.derivs = finite_difference(&t.times, &t.states)?;
                    t
                }
            };
            filter_to_region(&t, &config.region)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&filtered)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub file: String,
    pub points: usize,
    pub in_region: usize,
}

/// Index of a simulation output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub trajectories: Vec<TrajectoryEntry>,
    pub raw_snapshots: usize,
    pub filtered_snapshots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkedVdpParams>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes one CSV per trajectory plus the manifest.
pub fn write_simulation(config: &RunConfig, trajs: &[Trajectory], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(trajs.len());
    for (k, t) in trajs.iter().enumerate() {
        let file = format!("traj_{k:03}.csv");
        let set = SnapshotSet::from_trajectory(t);
        set.write_csv(&dir.join(&file))?;
        let in_region = filter_to_region(t, &config.region)?.len();
        entries.push(TrajectoryEntry { file, points: t.len(), in_region });
    }
    let manifest = Manifest {
        config: config.clone(),
        raw_snapshots: entries.iter().map(|e| e.points).sum(),
        filtered_snapshots: snapshots(config, trajs)?.len(),
        trajectories: entries,
        network: (config.system == Benchmark::NetworkedVdp).then(|| NetworkedVdpParams::sample(config.seed)),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads trajectories from a simulation directory (via its manifest), a
/// directory of CSV files, or a single CSV file.
pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let manifest = path.join(MANIFEST_FILE);
        if manifest.exists() {
            let m: Manifest = read_json(&manifest)?;
            m.trajectories.iter().map(|e| path.join(&e.file)).collect()
        } else {
            let mut v: Vec<PathBuf> = fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != GRID_FILE))
                .collect();
            v.sort();
            v
        }
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!("no trajectory files found under {}", path.display())));
    }
    files
        .iter()
        .map(|f| {
            let s = SnapshotSet::read_csv(f)?;
            Ok(Trajectory { times: s.times, states: s.states, derivs: s.derivs })
        })
        .collect()
}

/// Inferred Lyapunov matrix as written by `infer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredForm {
    #[serde(rename = "P")]
    pub p: QuadraticForm,
    pub gamma: f64,
    pub objective: f64,
    pub min_eigenvalue: f64,
    pub snapshots: usize,
}

impl InferredForm {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Assembles and solves the Zubov problem with `Q = γI`.
pub fn infer(config: &RunConfig, data: &SnapshotSet, gamma: f64) -> Result<(InferredForm, SolveReport)> {
    if data.is_empty() {
        return Err(Error::Data("no snapshots inside the region".into()));
    }
    let prob = assemble(data, &QuadraticForm::scaled_identity(data.dim(), gamma))?;
    let (p, report) = solve(&prob, &config.solver)?;
    Ok((
        InferredForm {
            gamma,
            objective: report.final_objective,
            min_eigenvalue: report.min_eigenvalue,
            snapshots: data.len(),
            p,
        },
        report,
    ))
}

pub fn write_inference(dir: &Path, form: &InferredForm, report: &SolveReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(P_FILE), form)?;
    fs::write(dir.join(REPORT_FILE), report.to_json()? + "\n")?;
    Ok(())
}

/// Level search and volume for an inferred form.
pub fn estimate(config: &RunConfig, model: &SystemModel, form: &InferredForm) -> Result<StabilityEstimate> {
    estimate_stability(form.p.clone(), form.gamma, model, &config.region, &config.level_search, &config.mc)
}

/// Planes for which ellipse cross-sections are exported.
pub fn plot_planes(config: &RunConfig) -> Vec<[usize; 2]> {
    match &config.level_search {
        LevelSearch::Subsystems { planes } => planes.clone(),
        LevelSearch::Full => {
            let n = config.region.dim();
            let mut planes = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    planes.push([a, b]);
                }
            }
            planes
        }
    }
}

/// Writes the estimate JSON and one 720-point ellipse CSV per plane.
pub fn write_estimate(config: &RunConfig, est: &StabilityEstimate, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(ESTIMATE_FILE), est.to_json()? + "\n")?;
    let planes = plot_planes(config);
    let mut written = Vec::new();
    for axes in planes {
        let name = if config.region.dim() == 2 {
            "ellipse.csv".to_string()
        } else {
            format!("ellipse_x{}x{}.csv", axes[0] + 1, axes[1] + 1)
        };
        let pts = ellipse_boundary(&est.p, est.c_star, axes, ELLIPSE_POINTS)?;
        let path = dir.join(name);
        write_ellipse_csv(&pts, axes, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_estimate(path: &Path) -> Result<StabilityEstimate> {
    read_json(path)
}

/// Containment checks against simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub containment_fraction: f64,
    pub num_boundary: usize,
    pub t_final: f64,
    pub conv_tol: f64,
    /// Grid nodes inside the ellipsoid whose trajectories did not converge.
    pub grid_violations: Option<usize>,
    pub grid_resolution: Option<usize>,
    /// Converged grid volume inside the region.
    pub roa_volume: Option<f64>,
    /// Ellipsoid volume divided by `roa_volume`.
    pub volume_ratio: Option<f64>,
}

/// Runs boundary-sample validation and, when configured, the grid oracle.
pub fn validate(config: &RunConfig, model: &SystemModel, est: &StabilityEstimate) -> Result<(Validation, Option<RoaGrid>)> {
    let v = &config.validation;
    let t_final = config.validation_horizon();
    let fraction = validate_containment(est, model, v.num_boundary, config.dt, t_final, v.conv_tol, v.seed)?;
    let grid = match v.grid_resolution {
        Some(res) if config.region.dim() <= 3 => {
            Some(true_roa_grid(model, &config.region, res, config.dt, t_final, v.conv_tol)?)
        }
        _ => None,
    };
    let validation = Validation {
        containment_fraction: fraction,
        num_boundary: v.num_boundary,
        t_final,
        conv_tol: v.conv_tol,
        grid_violations: grid.as_ref().map(|g| g.violations(&est.p, est.c_star).len()),
        grid_resolution: grid.as_ref().map(|g| g.resolution),
        roa_volume: grid.as_ref().map(RoaGrid::converged_volume),
        volume_ratio: grid.as_ref().map(|g| est.volume / g.converged_volume()),
    };
    Ok((validation, grid))
}

pub fn write_validation(dir: &Path, validation: &Validation, grid: Option<&RoaGrid>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(VALIDATION_FILE), validation)?;
    if let Some(g) = grid {
        g.write_csv(&dir.join(GRID_FILE))?;
    }
    Ok(())
}

/// Everything produced by a full benchmark run.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub manifest: Manifest,
    pub form: InferredForm,
    pub report: SolveReport,
    pub estimate: StabilityEstimate,
    pub validation: Validation,
    pub grid: Option<RoaGrid>,
}

/// Simulate, infer at the configured γ, estimate and validate. Files are
/// written to `config.output_dir` when `write` is set.
pub fn run_benchmark(config: &RunConfig, write: bool) -> Result<BenchmarkRun> {
    let dir = config.output_dir.clone();
    let (model, trajs) = simulate_trajectories(config)?;
    let manifest = if write {
        write_simulation(config, &trajs, &dir)?
    } else {
        Manifest {
            config: config.clone(),
            trajectories: Vec::new(),
            raw_snapshots: trajs.iter().map(Trajectory::len).sum(),
            filtered_snapshots: 0,
            network: None,
        }
    };
    let data = snapshots(config, &trajs)?;
    let (form, report) = infer(config, &data, config.gamma)?;
    let mut estimate = estimate(config, &model, &form)?;
    let (validation, grid) = validate(config, &model, &estimate)?;
    estimate.containment_fraction = Some(validation.containment_fraction);
    if write {
        write_inference(&dir, &form, &report)?;
        write_estimate(config, &estimate, &dir)?;
        write_validation(&dir, &validation, grid.as_ref())?;
    }
    let manifest = Manifest { filtered_snapshots: data.len(), ..manifest };
    Ok(BenchmarkRun { manifest, form, report, estimate, validation, grid })
}
