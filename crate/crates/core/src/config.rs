//! Run configuration with per-benchmark presets.
//!
//! Values are layered: benchmark preset, then a JSON file, then explicit
//! overrides (the CLI flags).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Region;
use crate::dynamics::{Benchmark, IcScheme, SystemModel, NETWORK_SIZE};
use crate::error::{Error, Result};
use crate::region::{default_gamma_grid, LevelSearch, McConfig};
use crate::solver::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeSource {
    /// Right-hand-side values recorded by the integrator.
    Solver,
    /// Backward differences of the stored states.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    /// Ellipsoid-surface samples simulated by `validate`.
    pub num_boundary: usize,
    /// Integration horizon; `None` means three times the data horizon.
    pub t_final: Option<f64>,
    pub conv_tol: f64,
    /// Points per axis for the grid oracle; `None` disables it.
    pub grid_resolution: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: Benchmark,
    /// Seeds the model parameters (networked system) and random initial
    /// conditions.
    pub seed: u64,
    pub region: Region,
    pub dt: f64,
    pub tf: f64,
    pub gamma: f64,
    pub gammas: Vec<f64>,
    pub ic_scheme: IcScheme,
    pub num_ics: usize,
    pub derivatives: DerivativeSource,
    pub solver: SolverConfig,
    pub mc: McConfig,
    pub level_search: LevelSearch,
    pub validation: ValidationConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Default settings for a benchmark.
    pub fn preset(system: Benchmark) -> Self {
        let n = system.dim();
        let (half_width, tf, dt, gamma, ic_scheme, num_ics) = match system {
            Benchmark::Quadratic2d => (5.0, 5.0, 0.01, 1.0, IcScheme::Circle { radius: 5.0 }, 16),
            Benchmark::Vanderpol => (3.0, 5.0, 0.01, 2.0, IcScheme::Circle { radius: 1.5 }, 10),
            Benchmark::Pendulum => (4.0, 10.0, 0.001, 0.2, IcScheme::BoxBoundary, 20),
            Benchmark::Trigexp => (3.0, 10.0, 0.01, 0.01, IcScheme::Uniform, 30),
            Benchmark::Cubic3d => (3.0, 5.0, 0.01, 1.0, IcScheme::Sphere { radius: 3.0 }, 25),
            Benchmark::NetworkedVdp => {
                (4.0, 10.0, 0.01, 0.1, IcScheme::PerSubsystemCircle { radius: 1.0 }, 80)
            }
        };
        let networked = system == Benchmark::NetworkedVdp;
        let level_search = if networked {
            LevelSearch::Subsystems {
                planes: (0..NETWORK_SIZE).map(|i| [2 * i, 2 * i + 1]).collect(),
            }
        } else {
            LevelSearch::Full
        };
        let mc = McConfig {
            num_samples: if networked { 100_000 } else { 200_000 },
            ..McConfig::default()
        };
        let validation = ValidationConfig {
            num_boundary: if networked { 500 } else { 1000 },
            t_final: None,
            conv_tol: 1e-2,
            grid_resolution: match n {
                2 => Some(201),
                3 => Some(61),
                _ => None,
            },
            seed: 0,
        };
        Self {
            system,
            seed: 0,
            region: Region::cube(n, half_width).expect("preset region is valid"),
            dt,
            tf,
            gamma,
            gammas: default_gamma_grid(),
            ic_scheme,
            num_ics,
            derivatives: DerivativeSource::Solver,
            solver: SolverConfig::default(),
            mc,
            level_search,
            validation,
            output_dir: PathBuf::from("out").join(system.name()),
        }
    }

    /// Preset for `system` with `overrides` (a possibly partial config object)
    /// merged on top. A `system` key in `overrides` selects the preset when
    /// `system` is `None`.
    pub fn resolve(system: Option<Benchmark>, overrides: Option<&Value>) -> Result<Self> {
        let from_file = overrides
            .and_then(|v| v.get("system"))
            .map(|s| serde_json::from_value::<Benchmark>(s.clone()))
            .transpose()
            .map_err(|e| Error::Config(format!("bad `system`: {e}")))?;
        let system = system
            .or(from_file)
            .ok_or_else(|| Error::Config("no system given (use --system or a config file)".into()))?;
        let mut value = serde_json::to_value(Self::preset(system))?;
        if let Some(o) = overrides {
            merge(&mut value, o);
        }
        value["system"] = serde_json::to_value(system)?;
        let config: Self =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads either a bare config object or a manifest with a `config` key.
    pub fn read_overrides(path: &Path) -> Result<Value> {
        let text = std::fs::read_to_string(path)?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(match value.get("config") {
            Some(inner) if inner.is_object() => inner.clone(),
            _ => value,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.system.dim();
        if self.region.dim() != n {
            return Err(Error::Config(format!("region has dimension {}, system {n}", self.region.dim())));
        }
        if !(self.dt > 0.0) || !(self.tf >= self.dt) {
            return Err(Error::Config(format!("need dt > 0 and tf >= dt (dt={}, tf={})", self.dt, self.tf)));
        }
        if !(self.gamma > 0.0) || self.gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::Config("gamma values must be positive and finite".into()));
        }
        if self.gammas.is_empty() {
            return Err(Error::Config("gamma grid is empty".into()));
        }
        if self.num_ics == 0 {
            return Err(Error::Config("num_ics must be at least 1".into()));
        }
        if !(self.validation.conv_tol > 0.0) {
            return Err(Error::Config("validation conv_tol must be positive".into()));
        }
        if let Some(t) = self.validation.t_final {
            if !(t >= self.dt) {
                return Err(Error::Config("validation t_final must be at least dt".into()));
            }
        }
        self.solver.validate()?;
        self.mc.validate()
    }

    pub fn model(&self) -> SystemModel {
        self.system.model(self.seed)
    }

    pub fn validation_horizon(&self) -> f64 {
        self.validation.t_final.unwrap_or(3.0 * self.tf)
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    // tagged enums are replaced wholesale
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_match_benchmark_table() {
        let rows = [
            (Benchmark::Quadratic2d, 5.0, 5.0, 0.01, 1.0),
            (Benchmark::Vanderpol, 3.0, 5.0, 0.01, 2.0),
            (Benchmark::Pendulum, 4.0, 10.0, 0.001, 0.2),
            (Benchmark::Trigexp, 3.0, 10.0, 0.01, 0.01),
            (Benchmark::Cubic3d, 3.0, 5.0, 0.01, 1.0),
            (Benchmark::NetworkedVdp, 4.0, 10.0, 0.01, 0.1),
        ];
        for (b, half, tf, dt, gamma) in rows {
            let c = RunConfig::preset(b);
            assert_eq!(c.region, Region::cube(b.dim(), half).unwrap());
            assert_eq!((c.tf, c.dt, c.gamma), (tf, dt, gamma), "{b}");
            c.validate().unwrap();
        }
        let vdp = RunConfig::preset(Benchmark::Vanderpol);
        assert_eq!(vdp.ic_scheme, IcScheme::Circle { radius: 1.5 });
        assert_eq!(vdp.num_ics, 10);
        assert_eq!(RunConfig::preset(Benchmark::Quadratic2d).num_ics, 16);
    }

    #[test]
    fn overrides_layer_on_preset() {
        let o = json!({"system": "pendulum", "gamma": 0.5, "mc": {"seed": 9}, "ic_scheme": {"kind": "uniform"}});
        let c = RunConfig::resolve(None, Some(&o)).unwrap();
        assert_eq!(c.system, Benchmark::Pendulum);
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.mc.seed, 9);
        assert_eq!(c.mc.num_samples, 200_000);
        assert_eq!(c.ic_scheme, IcScheme::Uniform);
        assert_eq!(c.dt, 0.001);
    }

    #[test]
    fn explicit_system_wins_over_file() {
        let o = json!({"system": "pendulum"});
        let c = RunConfig::resolve(Some(Benchmark::Trigexp), Some(&o)).unwrap();
        assert_eq!(c.system, Benchmark::Trigexp);
    }

    #[test]
    fn invalid_overrides_are_config_errors() {
        for o in [
            json!({"system": "lorenz"}),
            json!({"system": "vanderpol", "dt": -1.0}),
            json!({"system": "vanderpol", "region": {"lower": [-1, -1, -1], "upper": [1, 1, 1]}}),
            json!({"system": "vanderpol", "bogus": 1}),
            json!({"system": "vanderpol", "solver": {"eps_diag": 0.0}}),
        ] {
            assert!(matches!(RunConfig::resolve(None, Some(&o)), Err(Error::Config(_))), "{o}");
        }
        assert!(matches!(RunConfig::resolve(None, None), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_json() {
        for b in Benchmark::ALL {
            let c = RunConfig::preset(b);
            let v = serde_json::to_value(&c).unwrap();
            assert_eq!(RunConfig::resolve(None, Some(&v)).unwrap(), c);
        }
    }

    #[test]
    fn manifest_config_is_unwrapped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let c = RunConfig::preset(Benchmark::Cubic3d);
        std::fs::write(&path, serde_json::to_string(&json!({"config": c, "raw_snapshots": 5})).unwrap()).unwrap();
        let o = RunConfig::read_overrides(&path).unwrap();
        assert_eq!(RunConfig::resolve(None, Some(&o)).unwrap(), c);
    }

    #[test]
    fn validation_horizon_defaults_to_three_data_horizons() {
        let mut c = RunConfig::preset(Benchmark::Pendulum);
        assert_eq!(c.validation_horizon(), 30.0);
        c.validation.t_final = Some(4.0);
        assert_eq!(c.validation_horizon(), 4.0);
    }
}
