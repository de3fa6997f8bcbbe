//! Lyapunov function inference for black-box dynamical systems.
//!
//! A quadratic Lyapunov function `V(x) = xᵀPx` is fitted to trajectory
//! snapshots by minimizing the residual of the Zubov equation subject to
//! `P ≻ 0`. The largest sublevel set of `V` on which `V̇ < 0` is then
//! estimated by Monte Carlo sampling, giving an ellipsoidal inner estimate of
//! the stability region.
//!
//! The pipeline is split into modules:
//!
//! - [`dynamics`]: benchmark systems, RK4 integration, initial conditions
//! - [`data`]: snapshot sets, region filtering, Kronecker utilities
//! - [`zubov`]: quadratic forms and the factored least-squares objective
//! - [`solver`]: projected-gradient solve under an eigenvalue floor
//! - [`region`]: sublevel constant, volumes, γ sweep and validation oracles
//! - [`config`]: run configuration with per-benchmark presets
//! - [`pipeline`]: end-to-end orchestration used by the CLI

pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod pipeline;
pub mod region;
pub mod solver;
pub mod zubov;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for `(seed, stream)`; distinct streams give
/// independent sequences for the same user seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
