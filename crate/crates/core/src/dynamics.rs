//! Benchmark dynamical systems, a fixed-step RK4 integrator and initial
//! condition generators.
//!
//! Every system is exposed through [`SystemModel`], an opaque right-hand-side
//! evaluator. Nothing downstream inspects the governing equations.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Region;
use crate::error::{Error, Result};
use crate::seeded_rng;

const STREAM_NETWORK_PARAMS: u64 = 1;
const STREAM_INITIAL_CONDITIONS: u64 = 2;

type RhsFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Black-box vector field `f: R^n -> R^n`.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    dim: usize,
    rhs: Arc<RhsFn>,
}

impl SystemModel {
    pub fn new<F>(name: impl Into<String>, dim: usize, rhs: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            dim,
            rhs: Arc::new(rhs),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Writes `f(x)` into `out`. Both slices must have length `dim`.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        (self.rhs)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out);
        out
    }
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

/// Scratch space for classical fourth-order Runge-Kutta steps.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            stage: vec![0.0; dim],
        }
    }

    /// Advances `x` in place by `dt`. Returns `false` as soon as a stage
    /// value or the updated state is non-finite; `x` is then unspecified.
    pub fn step<F>(&mut self, f: &F, x: &mut [f64], dt: f64) -> bool
    where
        F: Fn(&[f64], &mut [f64]) + ?Sized,
    {
        f(x, &mut self.k1);
        self.step_with_slope(f, x, dt)
    }

    /// Same as [`Rk4::step`] but reuses a slope `f(x)` already stored via
    /// [`Rk4::slope_mut`].
    fn step_with_slope<F>(&mut self, f: &F, x: &mut [f64], dt: f64) -> bool
    where
        F: Fn(&[f64], &mut [f64]) + ?Sized,
    {
        let half = 0.5 * dt;
        if !all_finite(&self.k1) {
            return false;
        }
        for ((s, xi), k) in self.stage.iter_mut().zip(x.iter()).zip(&self.k1) {
            *s = xi + half * k;
        }
        f(&self.stage, &mut self.k2);
        if !all_finite(&self.k2) {
            return false;
        }
        for ((s, xi), k) in self.stage.iter_mut().zip(x.iter()).zip(&self.k2) {
            *s = xi + half * k;
        }
        f(&self.stage, &mut self.k3);
        if !all_finite(&self.k3) {
            return false;
        }
        for ((s, xi), k) in self.stage.iter_mut().zip(x.iter()).zip(&self.k3) {
            *s = xi + dt * k;
        }
        f(&self.stage, &mut self.k4);
        if !all_finite(&self.k4) {
            return false;
        }
        let sixth = dt / 6.0;
        for i in 0..x.len() {
            x[i] += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        all_finite(x)
    }

    fn slope_mut(&mut self) -> &mut [f64] {
        &mut self.k1
    }
}

#[inline]
fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One classical RK4 step of `dx/dt = f(x)`.
///
/// A non-finite stage value is reported as [`Error::Diverged`].
pub fn rk4_step<F>(f: F, x: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let mut next = x.to_vec();
    let mut rk = Rk4::new(x.len());
    if rk.step(&f, &mut next, dt) {
        Ok(next)
    } else {
        Err(Error::Diverged(0))
    }
}

/// Sampled solution of an initial value problem. Column `i` of `states` and
/// `derivs` corresponds to `times[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
    pub derivs: DMatrix<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }
}

/// Number of fixed steps of size `dt` that fit in `[0, tf]`, tolerant to
/// representation error in `tf / dt`.
pub fn step_count(dt: f64, tf: f64) -> usize {
    (tf / dt + 1e-9).floor() as usize
}

/// Integrates from `x0` on the grid `0, dt, ..., tf`, recording `f(x)` at
/// every stored state. Integration stops at the first non-finite state.
pub fn simulate(model: &SystemModel, x0: &[f64], dt: f64, tf: f64) -> Result<Trajectory> {
    let n = model.dim();
    if x0.len() != n {
        return Err(Error::Shape { expected: n, got: x0.len() });
    }
    if !(dt > 0.0) || !(tf >= dt) {
        return Err(Error::Config(format!("need dt > 0 and tf >= dt (dt={dt}, tf={tf})")));
    }
    if !all_finite(x0) {
        return Err(Error::Data("initial state is not finite".into()));
    }
    let f = |x: &[f64], out: &mut [f64]| model.eval_into(x, out);
    let steps = step_count(dt, tf);

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(n * (steps + 1));
    let mut derivs = Vec::with_capacity(n * (steps + 1));

    let mut rk = Rk4::new(n);
    let mut x = x0.to_vec();
    f(&x, rk.slope_mut());
    for i in 0..=steps {
        times.push(i as f64 * dt);
        states.extend_from_slice(&x);
        derivs.extend_from_slice(rk.slope_mut());
        if i == steps || !rk.step_with_slope(&f, &mut x, dt) {
            break;
        }
        f(&x, rk.slope_mut());
    }

    let len = times.len();
    Ok(Trajectory {
        times,
        states: DMatrix::from_vec(n, len, states),
        derivs: DMatrix::from_vec(n, len, derivs),
    })
}

/// Simulates every initial condition; output order matches `ics`.
pub fn simulate_many(
    model: &SystemModel,
    ics: &[Vec<f64>],
    dt: f64,
    tf: f64,
) -> Result<Vec<Trajectory>> {
    ics.par_iter().map(|x0| simulate(model, x0, dt, tf)).collect()
}

/// State reached after integrating for `t_final`, or `None` if the
/// trajectory became non-finite.
pub fn integrate_to(model: &SystemModel, x0: &[f64], dt: f64, t_final: f64) -> Option<Vec<f64>> {
    let f = |x: &[f64], out: &mut [f64]| model.eval_into(x, out);
    let mut rk = Rk4::new(model.dim());
    let mut x = x0.to_vec();
    for _ in 0..step_count(dt, t_final) {
        if !rk.step(&f, &mut x, dt) {
            return None;
        }
    }
    Some(x)
}

/// The six benchmark systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Quadratic2d,
    Vanderpol,
    Pendulum,
    Trigexp,
    Cubic3d,
    NetworkedVdp,
}

impl Benchmark {
    pub const ALL: [Benchmark; 6] = [
        Benchmark::Quadratic2d,
        Benchmark::Vanderpol,
        Benchmark::Pendulum,
        Benchmark::Trigexp,
        Benchmark::Cubic3d,
        Benchmark::NetworkedVdp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Quadratic2d => "quadratic2d",
            Benchmark::Vanderpol => "vanderpol",
            Benchmark::Pendulum => "pendulum",
            Benchmark::Trigexp => "trigexp",
            Benchmark::Cubic3d => "cubic3d",
            Benchmark::NetworkedVdp => "networked_vdp",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Benchmark::Cubic3d => 3,
            Benchmark::NetworkedVdp => 2 * NETWORK_SIZE,
            _ => 2,
        }
    }

    /// Builds the vector field. Only `networked_vdp` consumes `seed`.
    pub fn model(self, seed: u64) -> SystemModel {
        let name = self.name();
        match self {
            Benchmark::Quadratic2d => SystemModel::new(name, 2, |x, f| {
                f[0] = -2.0 * x[0] + x[0] * x[1];
                f[1] = -x[1] + x[0] * x[1];
            }),
            Benchmark::Vanderpol => vanderpol(1.0),
            Benchmark::Pendulum => SystemModel::new(name, 2, |x, f| {
                f[0] = x[1];
                f[1] = -x[0].sin() - 0.5 * x[1];
            }),
            Benchmark::Trigexp => SystemModel::new(name, 2, |x, f| {
                f[0] = -x[0] + x[1] + 0.5 * (x[0].exp() - 1.0);
                f[1] = -x[0] - x[1] + x[0] * x[1] + x[0] * x[0].cos();
            }),
            Benchmark::Cubic3d => SystemModel::new(name, 3, |x, f| {
                f[0] = -x[0] + x[1] * x[2] * x[2];
                f[1] = -x[1] - x[0] * x[1];
                f[2] = -x[2];
            }),
            Benchmark::NetworkedVdp => NetworkedVdpParams::sample(seed).model(),
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown system `{s}`")))
    }
}

/// Looks up a benchmark by name and builds its model.
pub fn benchmark_model(name: &str, seed: u64) -> Result<SystemModel> {
    Ok(name.parse::<Benchmark>()?.model(seed))
}

/// Van der Pol oscillator in the time direction where the origin is stable
/// and the limit cycle is repelling.
pub fn vanderpol(mu: f64) -> SystemModel {
    SystemModel::new("vanderpol", 2, move |x, f| {
        f[0] = -x[1];
        f[1] = x[0] - mu * (1.0 - x[0] * x[0]) * x[1];
    })
}

pub const NETWORK_SIZE: usize = 10;

/// Parameters of ten coupled Van der Pol subsystems. Subsystem `i` owns
/// state coordinates `2i` and `2i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkedVdpParams {
    pub mu: Vec<f64>,
    /// Row-major `NETWORK_SIZE x NETWORK_SIZE` coupling matrix.
    pub zeta: Vec<f64>,
    pub seed: u64,
}

impl NetworkedVdpParams {
    /// Draws `mu_i ~ U[0.5, 2.5]`; each off-diagonal `zeta_ij` is zero with
    /// probability 1/2 and otherwise `U[-0.1, 0.1]`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = seeded_rng(seed, STREAM_NETWORK_PARAMS);
        let mu = (0..NETWORK_SIZE).map(|_| rng.random_range(0.5..=2.5)).collect();
        let mut zeta = vec![0.0; NETWORK_SIZE * NETWORK_SIZE];
        for i in 0..NETWORK_SIZE {
            for j in 0..NETWORK_SIZE {
                if i != j && rng.random_bool(0.5) {
                    zeta[i * NETWORK_SIZE + j] = rng.random_range(-0.1..=0.1);
                }
            }
        }
        Self { mu, zeta, seed }
    }

    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.zeta[i * NETWORK_SIZE + j]
    }

    pub fn model(&self) -> SystemModel {
        let mu = self.mu.clone();
        let zeta = self.zeta.clone();
        SystemModel::new(Benchmark::NetworkedVdp.name(), 2 * NETWORK_SIZE, move |x, f| {
            for i in 0..NETWORK_SIZE {
                let (xi1, xi2) = (x[2 * i], x[2 * i + 1]);
                let mut coupling = 0.0;
                for j in 0..NETWORK_SIZE {
                    if j != i {
                        coupling += zeta[i * NETWORK_SIZE + j] * xi1 * x[2 * j + 1];
                    }
                }
                f[2 * i] = -xi2;
                f[2 * i + 1] = xi1 - mu[i] * (1.0 - xi1 * xi1) * xi2 + coupling;
            }
        })
    }
}

/// Placement rule for training-trajectory initial conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IcScheme {
    /// Equally spaced angles on a circle, starting at `(r, 0)`.
    Circle { radius: f64 },
    /// Fibonacci lattice on a 2-sphere.
    Sphere { radius: f64 },
    /// Equal arc-length spacing along the box perimeter, counterclockwise
    /// from the lower-left corner.
    BoxBoundary,
    Uniform,
    /// Every 2D subsystem gets its own random angle on a circle.
    PerSubsystemCircle { radius: f64 },
}

pub fn initial_conditions(
    scheme: &IcScheme,
    count: usize,
    region: &Region,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::Config("need at least one initial condition".into()));
    }
    let n = region.dim();
    let require_dim = |want: usize, what: &str| {
        if n == want {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} initial conditions need n = {want}, region has n = {n}")))
        }
    };
    let points: Vec<Vec<f64>> = match *scheme {
        IcScheme::Circle { radius } => {
            require_dim(2, "circle")?;
            (0..count)
                .map(|k| {
                    let theta = 2.0 * PI * k as f64 / count as f64;
                    vec![radius * theta.cos(), radius * theta.sin()]
                })
                .collect()
        }
        IcScheme::Sphere { radius } => {
            require_dim(3, "sphere")?;
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - (2.0 * k as f64 + 1.0) / count as f64;
                    let rho = (1.0 - z * z).max(0.0).sqrt();
                    let phi = golden * k as f64;
                    vec![radius * rho * phi.cos(), radius * rho * phi.sin(), radius * z]
                })
                .collect()
        }
        IcScheme::BoxBoundary => {
            require_dim(2, "box-boundary")?;
            let (x0, y0) = (region.lower[0], region.lower[1]);
            let (x1, y1) = (region.upper[0], region.upper[1]);
            let (w, h) = (x1 - x0, y1 - y0);
            let perimeter = 2.0 * (w + h);
            (0..count)
                .map(|k| {
                    let s = perimeter * k as f64 / count as f64;
                    if s < w {
                        vec![x0 + s, y0]
                    } else if s < w + h {
                        vec![x1, y0 + (s - w)]
                    } else if s < 2.0 * w + h {
                        vec![x1 - (s - w - h), y1]
                    } else {
                        vec![x0, y1 - (s - 2.0 * w - h)]
                    }
                })
                .collect()
        }
        IcScheme::Uniform => {
            let mut rng = seeded_rng(seed, STREAM_INITIAL_CONDITIONS);
            (0..count).map(|_| region.sample(&mut rng)).collect()
        }
        IcScheme::PerSubsystemCircle { radius } => {
            if n % 2 != 0 {
                return Err(Error::Config(format!(
                    "per-subsystem circles need an even dimension, got {n}"
                )));
            }
            let mut rng = seeded_rng(seed, STREAM_INITIAL_CONDITIONS);
            (0..count)
                .map(|_| {
                    let mut x = Vec::with_capacity(n);
                    for _ in 0..n / 2 {
                        let theta = rng.random_range(0.0..2.0 * PI);
                        x.push(radius * theta.cos());
                        x.push(radius * theta.sin());
                    }
                    x
                })
                .collect()
        }
    };
    if let Some(p) = points.iter().find(|p| !region.contains(p)) {
        return Err(Error::Config(format!("initial condition {p:?} lies outside the region")));
    }
    Ok(points)
}
