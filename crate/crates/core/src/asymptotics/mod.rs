//! Leading-order (ε²) Stokes' drift of the dumbbell, evaluated by quadrature.
//!
//! The drift per ε² of a single wave is `∫₀^∞ M(β) dβ`, where
//!
//! ```text
//! M(β) / (½u²k) = sin(ωβ) exp(−½k²σ²(β + λ⁻¹(1 − e^{−λβ})))
//!               − λ ∫₀^∞ exp(−λα − ½k²σ²(α + β + λ⁻¹)) sin(ω(α+β))
//!                        · sinh((k²σ²/2λ) e^{−λ(α+β)}) dα
//! ```
//!
//! The `exp(−z)·sinh(z q)` factor, `z = k²σ²/(2λ)`, is evaluated as
//! `½(exp(z(q−1)) − exp(−z(q+1)))` with `q − 1 = expm1(−λτ)`. Both exponents
//! are non-positive, so nothing overflows as λ → 0.
//!
//! Nothing here takes a wave phase: the drift is phase independent.

mod quadrature;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DumbbellParams, Forcing, ModelError, WaveParams};
use quadrature::{Failure, Integral, Tolerance};

/// Spring constants this far below (above) the wave time scales use the
/// weak (strong) spring closed form instead of quadrature.
const LIMIT_GUARD_RATIO: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AsymptoticsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid quadrature config: {0}")]
    InvalidConfig(String),
    #[error(
        "quadrature budget exceeded in {stage} integral after {panels} panels \
         (value {value:e}, error {error:e})"
    )]
    QuadratureBudget {
        stage: &'static str,
        value: f64,
        error: f64,
        panels: usize,
    },
    #[error(
        "waves {first} and {second} share the same (k, omega); merge their amplitudes first"
    )]
    DuplicateFrequency { first: usize, second: usize },
    #[error("invalid lambda grid: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// e-foldings of the exponential envelope kept before truncating.
    pub envelope_cutoff: f64,
    /// Panel budget per adaptive integral.
    pub max_subdivisions: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            abs_tol: 1e-12,
            envelope_cutoff: 40.0,
            max_subdivisions: 4000,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<(), AsymptoticsError> {
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(AsymptoticsError::InvalidConfig(format!(
                "rel_tol must be positive (got {})",
                self.rel_tol
            )));
        }
        if !(self.abs_tol > 0.0 && self.abs_tol.is_finite()) {
            return Err(AsymptoticsError::InvalidConfig(format!(
                "abs_tol must be positive (got {})",
                self.abs_tol
            )));
        }
        if !(self.envelope_cutoff >= 20.0 && self.envelope_cutoff.is_finite()) {
            return Err(AsymptoticsError::InvalidConfig(format!(
                "envelope_cutoff must be at least 20 (got {})",
                self.envelope_cutoff
            )));
        }
        if self.max_subdivisions == 0 {
            return Err(AsymptoticsError::InvalidConfig(
                "max_subdivisions must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn outer(&self) -> Tolerance {
        Tolerance {
            rel: self.rel_tol,
            abs: self.abs_tol,
            max_panels: self.max_subdivisions,
        }
    }

    fn inner(&self) -> Tolerance {
        Tolerance {
            rel: 0.1 * self.rel_tol,
            abs: 0.1 * self.abs_tol,
            max_panels: self.max_subdivisions,
        }
    }
}

/// A value with an absolute error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, error: 0.0 }
    }
}

/// `E[(X⁰_t − X⁰_{t−β})²] = σ²(β + λ⁻¹(1 − e^{−λβ}))`.
pub fn msd_x(beta: f64, p: &DumbbellParams) -> f64 {
    let relax = -(-p.lambda * beta).exp_m1() / p.lambda;
    p.sigma * p.sigma * (beta + relax)
}

/// `E[(X⁰_t − Y⁰_{t−τ})²] = σ²(τ + λ⁻¹(1 + e^{−λτ}))`.
pub fn msd_xy(tau: f64, p: &DumbbellParams) -> f64 {
    let relax = (1.0 + (-p.lambda * tau).exp()) / p.lambda;
    p.sigma * p.sigma * (tau + relax)
}

/// `E[f′(X⁰_t, t) f(X⁰_{t−β}, t−β)] = ½u²k sin(ωβ) exp(−½k² msd_x(β))` (ε = 1).
pub fn kernel_same_particle(beta: f64, w: &WaveParams, p: &DumbbellParams) -> f64 {
    0.5 * w.u * w.u * w.k * (w.omega * beta).sin() * (-0.5 * w.k * w.k * msd_x(beta, p)).exp()
}

/// `E[f′(X⁰_t, t) f(Y⁰_{t−τ}, t−τ)] = ½u²k sin(ωτ) exp(−½k² msd_xy(τ))` (ε = 1).
pub fn kernel_cross_particle(tau: f64, w: &WaveParams, p: &DumbbellParams) -> f64 {
    0.5 * w.u * w.u * w.k * (w.omega * tau).sin() * (-0.5 * w.k * w.k * msd_xy(tau, p)).exp()
}

/// Precomputed constants of `M(β)` for one wave and one dumbbell.
struct DriftDensity<'a> {
    wave: &'a WaveParams,
    params: &'a DumbbellParams,
    q: &'a QuadratureConfig,
    /// ½u²k
    prefactor: f64,
    /// k²σ²
    dephasing: f64,
    /// k²σ²/(2λ)
    z: f64,
    max_panel: f64,
}

impl<'a> DriftDensity<'a> {
    fn new(wave: &'a WaveParams, params: &'a DumbbellParams, q: &'a QuadratureConfig) -> Self {
        let dephasing = params.dephasing_rate(wave.k);
        Self {
            wave,
            params,
            q,
            prefactor: 0.5 * wave.u * wave.u * wave.k,
            dephasing,
            z: dephasing / (2.0 * params.lambda),
            max_panel: half_period(wave.omega),
        }
    }

    fn separation_integrand(&self, alpha: f64, beta: f64) -> f64 {
        let lambda = self.params.lambda;
        let tau = alpha + beta;
        let envelope = (-lambda * alpha - 0.5 * self.dephasing * tau).exp();
        let q = (-lambda * tau).exp();
        let damped_sinh =
            0.5 * ((self.z * (-lambda * tau).exp_m1()).exp() - (-self.z * (1.0 + q)).exp());
        envelope * (self.wave.omega * tau).sin() * damped_sinh
    }

    /// The α-integral in `M(β)`, with its error (including truncation).
    fn separation_term(&self, beta: f64) -> Result<Estimate, AsymptoticsError> {
        let decay = self.params.lambda + 0.5 * self.dephasing;
        let upper = self.q.envelope_cutoff / decay;
        let tail = 0.5 * (-self.q.envelope_cutoff).exp() / decay;
        let r = quadrature::integrate(
            |alpha| Ok::<_, AsymptoticsError>((self.separation_integrand(alpha, beta), 0.0)),
            0.0,
            upper,
            self.max_panel,
            self.q.inner(),
        )
        .map_err(|e| budget_error("inner", e))?;
        Ok(Estimate {
            value: r.value,
            error: r.error + tail,
        })
    }

    fn eval(&self, beta: f64) -> Result<Estimate, AsymptoticsError> {
        let lambda = self.params.lambda;
        let k = self.wave.k;
        let direct = (self.wave.omega * beta).sin() * (-0.5 * k * k * msd_x(beta, self.params)).exp();
        let sep = self.separation_term(beta)?;
        Ok(Estimate {
            value: self.prefactor * (direct - lambda * sep.value),
            error: (self.prefactor * lambda).abs() * sep.error,
        })
    }

    fn integrate(&self) -> Result<Estimate, AsymptoticsError> {
        let decay = 0.5 * self.dephasing;
        let upper = self.q.envelope_cutoff / decay;
        let tail = 2.0 * self.prefactor.abs() * (-self.q.envelope_cutoff).exp() / decay;
        let r: Integral = quadrature::integrate(
            |beta| self.eval(beta).map(|m| (m.value, m.error)),
            0.0,
            upper,
            self.max_panel,
            self.q.outer(),
        )
        .map_err(|e| budget_error("outer", e))?;
        Ok(Estimate {
            value: r.value,
            error: r.error + tail,
        })
    }
}

fn half_period(omega: f64) -> f64 {
    if omega == 0.0 {
        f64::INFINITY
    } else {
        PI / omega.abs()
    }
}

fn budget_error(stage: &'static str, e: Failure<AsymptoticsError>) -> AsymptoticsError {
    match e {
        Failure::Integrand(inner) => inner,
        Failure::Budget {
            value,
            error,
            panels,
        } => AsymptoticsError::QuadratureBudget {
            stage,
            value,
            error,
            panels,
        },
    }
}

fn check_lambda(p: &DumbbellParams) -> Result<(), AsymptoticsError> {
    if !(p.lambda > 0.0 && p.lambda.is_finite()) {
        return Err(ModelError::NonPositiveLambda(p.lambda).into());
    }
    if !(p.sigma > 0.0 && p.sigma.is_finite()) {
        return Err(ModelError::NonPositiveSigma(p.sigma).into());
    }
    Ok(())
}

/// The drift density `M(β)` with the inner quadrature error attached.
pub fn m_of_beta(
    beta: f64,
    w: &WaveParams,
    p: &DumbbellParams,
    q: &QuadratureConfig,
) -> Result<Estimate, AsymptoticsError> {
    check_lambda(p)?;
    q.validate()?;
    if w.omega == 0.0 || w.u == 0.0 || w.k == 0.0 {
        return Ok(Estimate::exact(0.0));
    }
    DriftDensity::new(w, p, q).eval(beta)
}

/// Drift per ε² of one wave, `∫₀^∞ M(β) dβ`.
///
/// Spring constants more than six decades away from `max(|ω|, k²σ²)` return
/// the matching closed-form limit.
pub fn drift_order2_single_wave(
    w: &WaveParams,
    p: &DumbbellParams,
    q: &QuadratureConfig,
) -> Result<Estimate, AsymptoticsError> {
    check_lambda(p)?;
    q.validate()?;
    if w.omega == 0.0 || w.u == 0.0 || w.k == 0.0 {
        return Ok(Estimate::exact(0.0));
    }
    let scale = w.omega.abs().max(p.dephasing_rate(w.k));
    if p.lambda < LIMIT_GUARD_RATIO * scale {
        let value = drift_weak_spring(w, p);
        return Ok(Estimate {
            value,
            error: (p.lambda / scale) * value.abs(),
        });
    }
    if p.lambda * LIMIT_GUARD_RATIO > scale {
        let value = drift_strong_spring(w, p);
        return Ok(Estimate {
            value,
            error: (scale / p.lambda) * value.abs(),
        });
    }
    DriftDensity::new(w, p, q).integrate()
}

/// Rigid-dumbbell limit λ → ∞: `2u²kω / (k⁴σ⁴ + 4ω²)`.
pub fn drift_strong_spring(w: &WaveParams, p: &DumbbellParams) -> f64 {
    let c = p.dephasing_rate(w.k);
    let denom = c * c + 4.0 * w.omega * w.omega;
    if denom == 0.0 {
        return 0.0;
    }
    2.0 * w.u * w.u * w.k * w.omega / denom
}

/// Free-bead limit λ → 0: `½u²kω / (k⁴σ⁴ + ω²)`.
pub fn drift_weak_spring(w: &WaveParams, p: &DumbbellParams) -> f64 {
    let c = p.dephasing_rate(w.k);
    let denom = c * c + w.omega * w.omega;
    if denom == 0.0 {
        return 0.0;
    }
    0.5 * w.u * w.u * w.k * w.omega / denom
}

/// Total leading-order drift of a multiwave forcing with offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPrediction {
    pub total_drift: f64,
    pub per_wave_order2: Vec<f64>,
    pub per_wave_error: Vec<f64>,
    pub offset_order1: f64,
    pub quadrature_error_estimate: f64,
    pub epsilon: f64,
}

impl DriftPrediction {
    /// `−ε·u₀ + ε²·Σᵢ 𝒱⁽²⁾ᵢ`, evaluated in the same order as `total_drift`.
    pub fn reconstruct(epsilon: f64, offset_order1: f64, per_wave_order2: &[f64]) -> f64 {
        let order2: f64 = per_wave_order2.iter().sum();
        epsilon * offset_order1 + epsilon * epsilon * order2
    }
}

fn same_frequency(a: &WaveParams, b: &WaveParams) -> bool {
    (a.k == b.k && a.omega == b.omega) || (a.k == -b.k && a.omega == -b.omega)
}

/// Waves add at order ε² when their `(k, ω)` differ; the offset contributes
/// `−ε·u₀` directly.
pub fn predict_total_drift(
    f: &Forcing,
    p: &DumbbellParams,
    q: &QuadratureConfig,
) -> Result<DriftPrediction, AsymptoticsError> {
    let (p, f) = crate::model::validate(p, f)?;
    q.validate()?;
    for (i, a) in f.waves.iter().enumerate() {
        for (j, b) in f.waves.iter().enumerate().skip(i + 1) {
            if same_frequency(a, b) {
                return Err(AsymptoticsError::DuplicateFrequency {
                    first: i,
                    second: j,
                });
            }
        }
    }
    let per_wave = f
        .waves
        .iter()
        .map(|w| drift_order2_single_wave(w, &p, q))
        .collect::<Result<Vec<_>, _>>()?;
    let per_wave_order2: Vec<f64> = per_wave.iter().map(|e| e.value).collect();
    let per_wave_error: Vec<f64> = per_wave.iter().map(|e| e.error).collect();
    let offset_order1 = 0.0 - f.u0;
    let eps2 = f.epsilon * f.epsilon;
    Ok(DriftPrediction {
        total_drift: DriftPrediction::reconstruct(f.epsilon, offset_order1, &per_wave_order2),
        quadrature_error_estimate: eps2 * per_wave_error.iter().sum::<f64>(),
        per_wave_order2,
        per_wave_error,
        offset_order1,
        epsilon: f.epsilon,
    })
}

/// Offsets `u₀` for which the interior of a λ-grid drifts opposite to both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignReversal {
    pub lambdas: Vec<f64>,
    pub order2: Vec<f64>,
    /// Index of the interior extremum bounding the interval.
    pub extremum_index: Option<usize>,
    /// Open interval `(lo, hi)` of offsets; `None` when no reversal is possible.
    pub interval: Option<(f64, f64)>,
}

impl SignReversal {
    pub fn is_empty(&self) -> bool {
        self.interval.is_none()
    }

    pub fn midpoint(&self) -> Option<f64> {
        self.interval.map(|(lo, hi)| 0.5 * (lo + hi))
    }
}

/// Scan a λ-grid (ascending, shared σ, single wave) for a non-monotone dip.
///
/// With positive end drifts the interval is
/// `(ε·min_interior 𝒱⁽²⁾, ε·min(𝒱⁽²⁾_first, 𝒱⁽²⁾_last))`; negative end drifts
/// mirror it. The template's own `u0` is ignored.
pub fn find_sign_reversal_offset(
    grid: &[DumbbellParams],
    template: &Forcing,
    q: &QuadratureConfig,
) -> Result<SignReversal, AsymptoticsError> {
    if template.waves.len() != 1 {
        return Err(AsymptoticsError::InvalidGrid(format!(
            "offset search needs exactly one wave (got {})",
            template.waves.len()
        )));
    }
    let Some(first) = grid.first() else {
        return Err(AsymptoticsError::InvalidGrid("grid is empty".into()));
    };
    if grid.iter().any(|p| p.sigma != first.sigma) {
        return Err(AsymptoticsError::InvalidGrid(
            "all grid entries must share sigma".into(),
        ));
    }
    if grid.windows(2).any(|w| !(w[0].lambda < w[1].lambda)) {
        return Err(AsymptoticsError::InvalidGrid(
            "lambda values must be strictly increasing".into(),
        ));
    }
    let wave = template.waves[0];
    let order2 = grid
        .iter()
        .map(|p| drift_order2_single_wave(&wave, p, q).map(|e| e.value))
        .collect::<Result<Vec<_>, _>>()?;
    let lambdas = grid.iter().map(|p| p.lambda).collect();
    let mut result = SignReversal {
        lambdas,
        order2,
        extremum_index: None,
        interval: None,
    };

    let n = result.order2.len();
    if n < 3 || template.epsilon == 0.0 {
        return Ok(result);
    }
    let (head, tail) = (result.order2[0], result.order2[n - 1]);
    let sign = if head > 0.0 && tail > 0.0 {
        1.0
    } else if head < 0.0 && tail < 0.0 {
        -1.0
    } else {
        return Ok(result);
    };
    let (idx, interior_min) = (1..n - 1)
        .map(|i| (i, sign * result.order2[i]))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("grid has an interior");
    let end_min = (sign * head).min(sign * tail);
    if interior_min < end_min {
        let eps = template.epsilon;
        let (lo, hi) = (eps * interior_min, eps * end_min);
        result.extremum_index = Some(idx);
        result.interval = Some(if sign > 0.0 { (lo, hi) } else { (-hi, -lo) });
    }
    Ok(result)
}
