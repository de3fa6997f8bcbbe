//! `lyapinf`: infer quadratic Lyapunov functions from trajectory data and
//! certify ellipsoidal stability regions.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Map, Value};

use lyapinf::config::RunConfig;
use lyapinf::dynamics::Benchmark;
use lyapinf::pipeline::{self, InferredForm, Manifest};
use lyapinf::region::{sweep_gamma, write_sweep_csv, PlaneEstimate};
use lyapinf::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_VALIDATION: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "lyapinf", version, about = "Lyapunov function inference from trajectory data")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the configured initial conditions and write trajectory CSVs.
    Simulate,
    /// Fit P to snapshot data.
    Infer {
        /// Simulation directory, directory of CSVs, or a single CSV
        /// (default: the output directory).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Certify the sublevel ellipsoid of an inferred P.
    Region {
        /// Inferred form (default: <output_dir>/P.json).
        #[arg(long = "p")]
        p_file: Option<PathBuf>,
    },
    /// Infer and certify for every γ in the grid; keep the largest volume.
    Sweep {
        /// Trajectory data; simulated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Check an estimate against forward simulation.
    Validate {
        /// Estimate JSON (default: <output_dir>/estimate.json).
        #[arg(long)]
        estimate: Option<PathBuf>,
    },
    /// Full pipeline with the benchmark's preset.
    Benchmark { name: Benchmark },
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON config (or a manifest written by `simulate`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    system: Option<Benchmark>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Comma-separated γ grid for `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    tf: Option<f64>,
    /// Number of initial conditions.
    #[arg(long, global = true)]
    num_ics: Option<usize>,
    /// Use finite-difference derivatives instead of solver values.
    #[arg(long, global = true)]
    fd: bool,
    /// Monte Carlo samples for the level search.
    #[arg(long, global = true)]
    num_samples: Option<usize>,
    #[arg(long, global = true)]
    mc_seed: Option<u64>,
    /// Ellipsoid-surface samples used by `validate`.
    #[arg(long, global = true)]
    num_boundary: Option<usize>,
    /// Points per axis for the grid oracle; 0 disables it.
    #[arg(long, global = true)]
    grid_resolution: Option<usize>,
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
}

impl Overrides {
    fn patch(&self) -> Value {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        if let Some(v) = self.seed {
            put("seed", json!(v));
        }
        if let Some(v) = self.gamma {
            put("gamma", json!(v));
        }
        if let Some(v) = &self.gammas {
            put("gammas", json!(v));
        }
        if let Some(v) = self.dt {
            put("dt", json!(v));
        }
        if let Some(v) = self.tf {
            put("tf", json!(v));
        }
        if let Some(v) = self.num_ics {
            put("num_ics", json!(v));
        }
        if self.fd {
            put("derivatives", json!("finite_difference"));
        }
        let mut mc = Map::new();
        if let Some(v) = self.num_samples {
            mc.insert("num_samples".into(), json!(v));
        }
        if let Some(v) = self.mc_seed {
            mc.insert("seed".into(), json!(v));
        }
        if !mc.is_empty() {
            put("mc", Value::Object(mc));
        }
        let mut val = Map::new();
        if let Some(v) = self.num_boundary {
            val.insert("num_boundary".into(), json!(v));
        }
        if let Some(v) = self.grid_resolution {
            val.insert("grid_resolution".into(), if v == 0 { Value::Null } else { json!(v) });
        }
        if !val.is_empty() {
            put("validation", Value::Object(val));
        }
        if let Some(v) = &self.output_dir {
            put("output_dir", json!(v));
        }
        Value::Object(m)
    }

    fn resolve(&self, system: Option<Benchmark>) -> lyapinf::Result<RunConfig> {
        let mut layered = match &self.config {
            Some(path) => RunConfig::read_overrides(path).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
                other => other,
            })?,
            None => json!({}),
        };
        if !layered.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        let patch = self.patch();
        let obj = layered.as_object_mut().expect("checked above");
        for (k, v) in patch.as_object().expect("patch is an object") {
            match (obj.get_mut(k), v) {
                (Some(Value::Object(slot)), Value::Object(inner)) => {
                    slot.extend(inner.iter().map(|(a, b)| (a.clone(), b.clone())));
                }
                _ => {
                    obj.insert(k.clone(), v.clone());
                }
            }
        }
        RunConfig::resolve(system.or(self.system), Some(&layered))
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Shape { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_DATA,
        Error::Numeric(_) | Error::NotPositiveDefinite(_) | Error::Diverged(_) => EXIT_NUMERIC,
    }
}

fn thread_count(raw: &str) -> lyapinf::Result<usize> {
    raw.trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("LYAPINF_THREADS must be a positive integer, got `{raw}`")))
}

fn init_threads() -> lyapinf::Result<()> {
    let Ok(raw) = std::env::var("LYAPINF_THREADS") else {
        return Ok(());
    };
    let n = thread_count(&raw)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn write_json(path: &Path, value: &Value) -> lyapinf::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_planes_csv(planes: &[PlaneEstimate], path: &Path) -> lyapinf::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["axis_a", "axis_b", "c_star", "violations_found", "capped_by_region"])?;
    for pl in planes {
        w.write_record([
            (pl.axes[0] + 1).to_string(),
            (pl.axes[1] + 1).to_string(),
            format!("{:.16e}", pl.estimate.c_star),
            pl.estimate.violations_found.to_string(),
            pl.estimate.capped_by_region.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn load_data(config: &RunConfig, path: Option<&Path>) -> lyapinf::Result<lyapinf::data::SnapshotSet> {
    let path = path.unwrap_or(&config.output_dir);
    if !path.exists() {
        return Err(Error::Data(format!("{} does not exist; run `simulate` first or pass --data", path.display())));
    }
    let trajs = pipeline::load_trajectories(path)?;
    let data = pipeline::snapshots(config, &trajs)?;
    if data.is_empty() {
        return Err(Error::Data(format!("no snapshots of {} lie inside the region", path.display())));
    }
    Ok(data)
}

fn run(cli: Cli) -> lyapinf::Result<u8> {
    let system = match &cli.command {
        Command::Benchmark { name } => Some(*name),
        _ => None,
    };
    let config = cli.overrides.resolve(system)?;
    let dir = config.output_dir.clone();
    info!("system {} -> {}", config.system, dir.display());

    match cli.command {
        Command::Simulate => {
            let (_, trajs) = pipeline::simulate_trajectories(&config)?;
            let m = pipeline::write_simulation(&config, &trajs, &dir)?;
            println!(
                "{} trajectories, {} raw snapshots, {} inside the region",
                m.trajectories.len(),
                m.raw_snapshots,
                m.filtered_snapshots
            );
        }
        Command::Infer { data } => {
            let data = load_data(&config, data.as_deref())?;
            let (form, report) = pipeline::infer(&config, &data, config.gamma)?;
            pipeline::write_inference(&dir, &form, &report)?;
            if !report.converged {
                warn!("solver stopped after {} iterations without converging", report.iterations);
            }
            println!("objective {:.6e}", form.objective);
            println!("min eigenvalue {:.6e}", form.min_eigenvalue);
        }
        Command::Region { p_file } => {
            let path = p_file.unwrap_or_else(|| dir.join(pipeline::P_FILE));
            let form = InferredForm::read(&path)?;
            form.p.require_positive_definite()?;
            let model = config.model();
            let est = pipeline::estimate(&config, &model, &form)?;
            pipeline::write_estimate(&config, &est, &dir)?;
            if let Some(planes) = &est.planes {
                write_planes_csv(planes, &dir.join("planes.csv"))?;
                for pl in planes {
                    println!("plane (x{}, x{}): c* {:.6e}", pl.axes[0] + 1, pl.axes[1] + 1, pl.estimate.c_star);
                }
            }
            println!("c* {:.6e}, volume {:.6e}", est.c_star, est.volume);
        }
        Command::Sweep { data } => {
            let model = config.model();
            let data = match data {
                Some(path) => load_data(&config, Some(&path))?,
                None => {
                    let (_, trajs) = pipeline::simulate_trajectories(&config)?;
                    pipeline::snapshots(&config, &trajs)?
                }
            };
            if data.is_empty() {
                return Err(Error::Data("no snapshots inside the region".into()));
            }
            let outcome =
                sweep_gamma(&data, &model, &config.region, &config.gammas, &config.solver, &config.level_search, &config.mc)?;
            fs::create_dir_all(&dir)?;
            write_sweep_csv(&outcome.rows, &dir.join("sweep.csv"))?;
            fs::write(dir.join("best_estimate.json"), outcome.best.to_json()? + "\n")?;
            for r in &outcome.rows {
                match &r.error {
                    None => println!("gamma {:.4e}: c* {:.6e}, volume {:.6e}", r.gamma, r.c_star, r.volume),
                    Some(e) => println!("gamma {:.4e}: failed ({e})", r.gamma),
                }
            }
            println!("best gamma {:.4e}, volume {:.6e}", outcome.best.gamma, outcome.best.volume);
        }
        Command::Validate { estimate } => {
            let path = estimate.unwrap_or_else(|| dir.join(pipeline::ESTIMATE_FILE));
            let mut est = pipeline::read_estimate(&path)?;
            let model = config.model();
            let (v, grid) = pipeline::validate(&config, &model, &est)?;
            pipeline::write_validation(&dir, &v, grid.as_ref())?;
            est.containment_fraction = Some(v.containment_fraction);
            fs::write(&path, est.to_json()? + "\n")?;
            println!("containment fraction {}", v.containment_fraction);
            if let (Some(bad), Some(ratio)) = (v.grid_violations, v.volume_ratio) {
                println!("grid violations {bad}, volume ratio {ratio:.4}");
            }
            if v.containment_fraction < 1.0 {
                return Ok(EXIT_VALIDATION);
            }
        }
        Command::Benchmark { .. } => {
            let r = pipeline::run_benchmark(&config, true)?;
            if let Some(planes) = &r.estimate.planes {
                write_planes_csv(planes, &dir.join("planes.csv"))?;
            }
            let Manifest { raw_snapshots, filtered_snapshots, .. } = r.manifest;
            println!("snapshots {raw_snapshots} raw, {filtered_snapshots} inside the region");
            println!("objective {:.6e}, min eigenvalue {:.6e}", r.form.objective, r.form.min_eigenvalue);
            println!("c* {:.6e}, volume {:.6e}", r.estimate.c_star, r.estimate.volume);
            println!("containment fraction {}", r.validation.containment_fraction);
            if let Some(ratio) = r.validation.volume_ratio {
                println!("volume ratio {ratio:.4}");
            }
            write_json(&dir.join("summary.json"), &json!({
                "system": config.system,
                "raw_snapshots": raw_snapshots,
                "filtered_snapshots": filtered_snapshots,
                "c_star": r.estimate.c_star,
                "volume": r.estimate.volume,
                "containment_fraction": r.validation.containment_fraction,
                "volume_ratio": r.validation.volume_ratio,
            }))?;
            if r.validation.containment_fraction < 1.0 {
                return Ok(EXIT_VALIDATION);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| run(cli));
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(status(result))
}

fn status(result: lyapinf::Result<u8>) -> u8 {
    match result {
        Ok(code) => code,
        Err(e) => exit_code(&e),
    }
}
