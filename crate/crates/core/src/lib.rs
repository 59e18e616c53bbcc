//! Stochastic Stokes' drift of an elastic dumbbell.
//!
//! Two independent engines compute the mean drift of a pair of Brownian beads
//! joined by a zero-length linear spring and advected by travelling waves:
//!
//! * [`asymptotics`] evaluates the leading-order (ε²) drift by nested
//!   quadrature of the drift density `M(β)`, plus the strong and weak spring
//!   closed forms.
//! * [`sde_sim`] integrates the bead SDEs directly with Euler–Maruyama from
//!   the stationary spring law, on reproducible per-replica random streams.
//!
//! [`estimator`] reduces trajectories to drift estimates and compares the two
//! engines; [`cli`] wires everything to the `dumbbell-drift` binary.

pub mod asymptotics;
pub mod cli;
pub mod estimator;
pub mod model;
pub mod sde_sim;

pub use asymptotics::{DriftPrediction, Estimate, QuadratureConfig};
pub use estimator::{DriftEstimate, SweepResult};
pub use model::{DumbbellParams, DumbbellState, Forcing, WaveParams};
pub use sde_sim::{SimConfig, Trajectory};
