//! Direct simulation of the dumbbell SDEs
//!
//! ```text
//! dX = (F(X, t) − ½λ(X − Y)) dt + √2 σ dB
//! dY = (F(Y, t) + ½λ(X − Y)) dt + √2 σ dW
//! ```
//!
//! with `F` the full forcing (ε included). Each replica starts with the centre
//! at the origin, the half-separation drawn from its stationary law
//! `N(0, σ²/(2λ))` and fresh uniform wave phases.
//!
//! Every replica owns a ChaCha8 stream keyed by the master seed and selected
//! by the replica id, so a replica's numbers never depend on which thread ran
//! it or on how many other replicas exist.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2, TAU};
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, format_float, DumbbellParams, DumbbellState, Forcing, ModelError};

/// Largest admissible `λ·dt` for the explicit Euler–Maruyama scheme.
pub const MAX_EULER_STIFFNESS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dt must be positive and finite (got {0})")]
    InvalidStep(f64),
    #[error("t_final must be positive and finite (got {0})")]
    InvalidHorizon(f64),
    #[error("replicas must be at least 1")]
    NoReplicas,
    #[error(
        "dt*lambda = {product} exceeds {MAX_EULER_STIFFNESS} (dt {dt}, lambda {lambda}); \
         reduce dt or use the splitting scheme"
    )]
    StiffStep { dt: f64, lambda: f64, product: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
    /// Exact OU update for the spring part, Euler for the forcing.
    Splitting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    pub replicas: usize,
    /// Keep every n-th state (0 keeps only the endpoints).
    pub record_every: u64,
    pub scheme: Scheme,
    /// Draw wave phases per replica; when false the configured phases are used.
    pub random_phase: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_final: 1e5,
            seed: 0,
            replicas: 64,
            record_every: 0,
            scheme: Scheme::EulerMaruyama,
            random_phase: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, p: &DumbbellParams) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidStep(self.dt));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(SimError::InvalidHorizon(self.t_final));
        }
        if self.replicas == 0 {
            return Err(SimError::NoReplicas);
        }
        let product = self.dt * p.lambda;
        if self.scheme == Scheme::EulerMaruyama && !(product < MAX_EULER_STIFFNESS) {
            return Err(SimError::StiffStep {
                dt: self.dt,
                lambda: p.lambda,
                product,
            });
        }
        Ok(())
    }

    /// Number of steps taken, `⌈t_final/dt⌉`.
    pub fn steps(&self) -> u64 {
        let ratio = self.t_final / self.dt;
        // absorb rounding in ratios that are integers in exact arithmetic
        let nearest = ratio.round();
        if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest as u64
        } else {
            ratio.ceil() as u64
        }
    }

    /// Shortest horizon worth using for drift estimation: one hundred times
    /// the slowest of the spring, wave and dephasing time scales.
    pub fn recommended_horizon(p: &DumbbellParams, f: &Forcing) -> f64 {
        let mut slowest = 1.0 / p.lambda;
        for w in &f.waves {
            if w.omega != 0.0 {
                slowest = slowest.max(TAU / w.omega.abs());
            }
            let dephasing = 0.5 * p.dephasing_rate(w.k);
            if dephasing > 0.0 {
                slowest = slowest.max(1.0 / dephasing);
            }
        }
        100.0 * slowest
    }

    /// Human-readable warnings for configurations that run but are unwise.
    pub fn warnings(&self, p: &DumbbellParams, f: &Forcing) -> Vec<String> {
        let mut out = Vec::new();
        let recommended = Self::recommended_horizon(p, f);
        if self.t_final < recommended {
            out.push(format!(
                "t_final {} is below the recommended {recommended} for drift estimation",
                self.t_final
            ));
        }
        let total = self.steps() as f64 * self.replicas as f64;
        if total > 1e10 {
            out.push(format!(
                "{total:.3e} integration steps requested; expect hours of compute"
            ));
        }
        out
    }
}

/// Derive an independent 64-bit seed for sub-experiment `index` (SplitMix64).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream of one replica: ChaCha8 keyed by the seed, stream = replica id.
#[derive(Debug, Clone)]
pub struct ReplicaStream {
    rng: ChaCha8Rng,
}

impl ReplicaStream {
    pub fn new(seed: u64, replica_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(replica_id);
        Self { rng }
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn phase(&mut self) -> f64 {
        TAU * self.uniform()
    }
}

/// Stationary start: centre at 0, half-separation `U₀ ~ N(0, σ²/(2λ))`.
pub fn init_state(p: &DumbbellParams, rng: &mut ReplicaStream) -> DumbbellState {
    let u0 = p.stationary_separation_variance().sqrt() * rng.normal();
    DumbbellState::from_separation_centre(u0, 0.0, 0.0)
}

/// Precomputed per-run step coefficients.
#[derive(Debug, Clone, Copy)]
struct Stepper {
    scheme: Scheme,
    dt: f64,
    half_lambda: f64,
    /// √2·σ·√dt
    bead_noise: f64,
    /// e^{−λdt}
    ou_decay: f64,
    /// σ·√((1 − e^{−2λdt})/(2λ))
    ou_noise: f64,
    /// σ·√dt
    centre_noise: f64,
}

impl Stepper {
    fn new(p: &DumbbellParams, dt: f64, scheme: Scheme) -> Self {
        let ou_var = -(-2.0 * p.lambda * dt).exp_m1() / (2.0 * p.lambda);
        Self {
            scheme,
            dt,
            half_lambda: 0.5 * p.lambda,
            bead_noise: SQRT_2 * p.sigma * dt.sqrt(),
            ou_decay: (-p.lambda * dt).exp(),
            ou_noise: p.sigma * ou_var.sqrt(),
            centre_noise: p.sigma * dt.sqrt(),
        }
    }

    /// Advance by one step using the two bead noises `xi_x`, `xi_y`.
    #[inline]
    fn advance(&self, s: &DumbbellState, f: &Forcing, xi_x: f64, xi_y: f64) -> DumbbellState {
        self.advance_with(s, f.eval(s.x, s.t), f.eval(s.y, s.t), xi_x, xi_y)
    }

    /// Advance given the forcing already evaluated at both beads.
    #[inline]
    fn advance_with(&self, s: &DumbbellState, fx: f64, fy: f64, xi_x: f64, xi_y: f64) -> DumbbellState {
        match self.scheme {
            Scheme::EulerMaruyama => {
                let spring = self.half_lambda * (s.x - s.y);
                DumbbellState {
                    x: s.x + (fx - spring) * self.dt + self.bead_noise * xi_x,
                    y: s.y + (fy + spring) * self.dt + self.bead_noise * xi_y,
                    t: s.t + self.dt,
                }
            }
            Scheme::Splitting => {
                // (ξx − ξy)/√2 and (ξx + ξy)/√2 are the separation and centre noises
                let eta_u = FRAC_1_SQRT_2 * (xi_x - xi_y);
                let eta_v = FRAC_1_SQRT_2 * (xi_x + xi_y);
                let u = s.u() * self.ou_decay + 0.5 * (fx - fy) * self.dt + self.ou_noise * eta_u;
                let v = s.v() + 0.5 * (fx + fy) * self.dt + self.centre_noise * eta_v;
                DumbbellState::from_separation_centre(u, v, s.t + self.dt)
            }
        }
    }
}

/// One Euler–Maruyama step.
pub fn step(
    s: &DumbbellState,
    f: &Forcing,
    p: &DumbbellParams,
    dt: f64,
    rng: &mut ReplicaStream,
) -> DumbbellState {
    step_with_scheme(s, f, p, dt, Scheme::EulerMaruyama, rng)
}

pub fn step_with_scheme(
    s: &DumbbellState,
    f: &Forcing,
    p: &DumbbellParams,
    dt: f64,
    scheme: Scheme,
    rng: &mut ReplicaStream,
) -> DumbbellState {
    let xi_x = rng.normal();
    let xi_y = rng.normal();
    Stepper::new(p, dt, scheme).advance(s, f, xi_x, xi_y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub replica_id: u64,
    /// Master seed; the stream is `(seed_used, replica_id)`.
    pub seed_used: u64,
    /// Wave phases used by this replica, in wave order.
    pub phases: Vec<f64>,
    pub initial: DumbbellState,
    #[serde(rename = "final")]
    pub final_state: DumbbellState,
    pub samples: Option<Vec<DumbbellState>>,
}

impl Trajectory {
    pub fn elapsed(&self) -> f64 {
        self.final_state.t - self.initial.t
    }

    pub fn centre_displacement(&self) -> f64 {
        self.final_state.v() - self.initial.v()
    }

    pub fn drift(&self) -> f64 {
        self.centre_displacement() / self.elapsed()
    }
}

fn start_replica(
    f: &Forcing,
    p: &DumbbellParams,
    c: &SimConfig,
    rng: &mut ReplicaStream,
) -> (DumbbellState, Forcing) {
    let initial = init_state(p, rng);
    let forcing = if c.random_phase {
        let phases: Vec<f64> = f.waves.iter().map(|_| rng.phase()).collect();
        f.with_phases(&phases)
    } else {
        f.clone()
    };
    (initial, forcing)
}

/// Steps between exact re-evaluations of the rotated phases.
const RESYNC_EVERY: u64 = 1024;

/// Increments above this use `sin_cos`; below it the series error is < 1e-17.
const SERIES_LIMIT: f64 = 0.25;

#[inline]
fn small_sin_cos(d: f64) -> (f64, f64) {
    if d.abs() > SERIES_LIMIT {
        return d.sin_cos();
    }
    let d2 = d * d;
    let sin = d
        * (1.0
            + d2 * (-1.0 / 6.0
                + d2 * (1.0 / 120.0
                    + d2 * (-1.0 / 5040.0 + d2 * (1.0 / 362_880.0 + d2 * (-1.0 / 39_916_800.0))))));
    let cos = 1.0
        + d2 * (-0.5
            + d2 * (1.0 / 24.0
                + d2 * (-1.0 / 720.0
                    + d2 * (1.0 / 40_320.0
                        + d2 * (-1.0 / 3_628_800.0 + d2 * (1.0 / 479_001_600.0))))));
    (sin, cos)
}

#[derive(Debug, Clone, Copy)]
struct RotorWave {
    u: f64,
    k: f64,
    omega_dt: f64,
    /// cos and sin of the phase at each bead
    cx: f64,
    sx: f64,
    cy: f64,
    sy: f64,
}

/// Tracks `cos θᵢ` at both beads by rotating through the per-step phase
/// increment `kᵢΔx − ωᵢdt` instead of calling `cos` every step. The
/// increments are small, so a short series is exact to rounding; exact
/// values are restored every `RESYNC_EVERY` steps to stop drift.
#[derive(Debug, Clone)]
struct PhaseRotor {
    waves: Vec<RotorWave>,
    epsilon: f64,
    u0: f64,
}

impl PhaseRotor {
    fn new(f: &Forcing, dt: f64, s: &DumbbellState) -> Self {
        let waves = f
            .waves
            .iter()
            .map(|w| RotorWave {
                u: w.u,
                k: w.k,
                omega_dt: w.omega * dt,
                cx: 0.0,
                sx: 0.0,
                cy: 0.0,
                sy: 0.0,
            })
            .collect();
        let mut r = Self {
            waves,
            epsilon: f.epsilon,
            u0: f.u0,
        };
        r.resync(f, s);
        r
    }

    fn resync(&mut self, f: &Forcing, s: &DumbbellState) {
        for (r, w) in self.waves.iter_mut().zip(&f.waves) {
            (r.sx, r.cx) = w.phase(s.x, s.t).sin_cos();
            (r.sy, r.cy) = w.phase(s.y, s.t).sin_cos();
        }
    }

    #[inline]
    fn forcing(&self) -> (f64, f64) {
        let (mut fx, mut fy) = (0.0, 0.0);
        for r in &self.waves {
            fx += r.u * r.cx;
            fy += r.u * r.cy;
        }
        (self.epsilon * (fx - self.u0), self.epsilon * (fy - self.u0))
    }

    #[inline]
    fn rotate(&mut self, dx: f64, dy: f64) {
        for r in self.waves.iter_mut() {
            let (s, c) = small_sin_cos(r.k * dx - r.omega_dt);
            (r.cx, r.sx) = (r.cx * c - r.sx * s, r.sx * c + r.cx * s);
            let (s, c) = small_sin_cos(r.k * dy - r.omega_dt);
            (r.cy, r.sy) = (r.cy * c - r.sy * s, r.sy * c + r.cy * s);
        }
    }
}

/// Replicas advanced together in one loop. Their dependency chains are
/// independent, which lets the CPU overlap the trigonometric latency.
const LANES: usize = 4;

/// Run one replica to `⌈t_final/dt⌉·dt`.
pub fn simulate(
    f: &Forcing,
    p: &DumbbellParams,
    c: &SimConfig,
    replica_id: u64,
) -> Result<Trajectory, SimError> {
    let (p, f) = model::validate(p, f)?;
    c.validate(&p)?;
    Ok(run_lanes(&f, &p, c, &[replica_id]).pop().expect("one lane"))
}

type Lane = (ReplicaStream, Forcing, DumbbellState, DumbbellState, PhaseRotor);

/// Advance up to `LANES` replicas in lockstep. Each lane performs exactly the
/// operations of a lone run, so results do not depend on the grouping.
fn run_lanes(f: &Forcing, p: &DumbbellParams, c: &SimConfig, ids: &[u64]) -> Vec<Trajectory> {
    debug_assert!(!ids.is_empty() && ids.len() <= LANES);
    let stepper = Stepper::new(p, c.dt, c.scheme);
    let n = c.steps();
    let mut lanes: Vec<Lane> = ids
        .iter()
        .map(|&id| {
            let mut rng = ReplicaStream::new(c.seed, id);
            let (initial, forcing) = start_replica(f, p, c, &mut rng);
            let rotor = PhaseRotor::new(&forcing, c.dt, &initial);
            (rng, forcing, initial, initial, rotor)
        })
        .collect();
    let mut samples: Vec<Option<Vec<DumbbellState>>> = lanes
        .iter()
        .map(|lane| {
            (c.record_every > 0).then(|| {
                let mut v = Vec::with_capacity((n / c.record_every + 1).min(1 << 24) as usize);
                v.push(lane.2);
                v
            })
        })
        .collect();

    for i in 1..=n {
        let t = i as f64 * c.dt;
        for (rng, forcing, _, s, rotor) in lanes.iter_mut() {
            let xi_x = rng.normal();
            let xi_y = rng.normal();
            let (fx, fy) = rotor.forcing();
            let next = stepper.advance_with(s, fx, fy, xi_x, xi_y);
            // index-based time keeps t exact over 10⁸ steps
            let next = DumbbellState { t, ..next };
            if i % RESYNC_EVERY == 0 {
                rotor.resync(forcing, &next);
            } else {
                rotor.rotate(next.x - s.x, next.y - s.y);
            }
            *s = next;
        }
        if c.record_every > 0 && i % c.record_every == 0 {
            for (lane, rec) in lanes.iter().zip(samples.iter_mut()) {
                rec.as_mut().expect("recording").push(lane.3);
            }
        }
    }

    lanes
        .into_iter()
        .zip(samples)
        .zip(ids)
        .map(|(((_, forcing, initial, final_state, _), samples), &replica_id)| Trajectory {
            replica_id,
            seed_used: c.seed,
            phases: forcing.waves.iter().map(|w| w.phi).collect(),
            initial,
            final_state,
            samples,
        })
        .collect()
}

/// Run replicas `0..c.replicas` in parallel; output is in replica order.
pub fn simulate_ensemble(
    f: &Forcing,
    p: &DumbbellParams,
    c: &SimConfig,
) -> Result<Vec<Trajectory>, SimError> {
    let (p, f) = model::validate(p, f)?;
    c.validate(&p)?;
    let ids: Vec<u64> = (0..c.replicas as u64).collect();
    Ok(ids
        .par_chunks(LANES)
        .map(|chunk| run_lanes(&f, &p, c, chunk))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect())
}

/// Run one replica at `dt` and at `dt/2` on the same Brownian path.
///
/// The fine run consumes two noise pairs per coarse step; the coarse run uses
/// their normalized sums, so the pair differs only through discretization.
/// Returns `(coarse, fine)`; samples are not recorded.
pub fn simulate_refinement_pair(
    f: &Forcing,
    p: &DumbbellParams,
    c: &SimConfig,
    replica_id: u64,
) -> Result<(Trajectory, Trajectory), SimError> {
    let (p, f) = model::validate(p, f)?;
    c.validate(&p)?;
    let mut rng = ReplicaStream::new(c.seed, replica_id);
    let (initial, forcing) = start_replica(&f, &p, c, &mut rng);
    let coarse_step = Stepper::new(&p, c.dt, c.scheme);
    let fine_step = Stepper::new(&p, 0.5 * c.dt, c.scheme);
    let n = c.steps();

    let mut coarse = initial;
    let mut fine = initial;
    for i in 1..=n {
        let (ax, ay) = (rng.normal(), rng.normal());
        let (bx, by) = (rng.normal(), rng.normal());
        fine = fine_step.advance(&fine, &forcing, ax, ay);
        fine.t = (2 * i - 1) as f64 * fine_step.dt;
        fine = fine_step.advance(&fine, &forcing, bx, by);
        fine.t = i as f64 * c.dt;
        coarse = coarse_step.advance(
            &coarse,
            &forcing,
            FRAC_1_SQRT_2 * (ax + bx),
            FRAC_1_SQRT_2 * (ay + by),
        );
        coarse.t = i as f64 * c.dt;
    }
    let phases: Vec<f64> = forcing.waves.iter().map(|w| w.phi).collect();
    let make = |final_state| Trajectory {
        replica_id,
        seed_used: c.seed,
        phases: phases.clone(),
        initial,
        final_state,
        samples: None,
    };
    Ok((make(coarse), make(fine)))
}

/// Final-only replica records: `replica_id,v_initial,v_final,t_final`.
pub fn write_final_records<W: Write>(mut w: W, trajectories: &[Trajectory]) -> io::Result<()> {
    writeln!(w, "replica_id,v_initial,v_final,t_final")?;
    for tr in trajectories {
        writeln!(
            w,
            "{},{},{},{}",
            tr.replica_id,
            format_float(tr.initial.v()),
            format_float(tr.final_state.v()),
            format_float(tr.final_state.t)
        )?;
    }
    Ok(())
}

/// Recorded states: `replica_id,t,x,y`. Replicas without samples are skipped.
pub fn write_samples<W: Write>(mut w: W, trajectories: &[Trajectory]) -> io::Result<()> {
    writeln!(w, "replica_id,t,x,y")?;
    for tr in trajectories {
        for s in tr.samples.iter().flatten() {
            let (t, x, y) = (format_float(s.t), format_float(s.x), format_float(s.y));
            writeln!(w, "{},{t},{x},{y}", tr.replica_id)?;
        }
    }
    Ok(())
}
