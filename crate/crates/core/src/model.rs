//! Parameter and state types shared by the asymptotic and Monte Carlo engines.
//!
//! The forcing field is a superposition of travelling cosine waves minus a
//! constant offset, all scaled by one global wave-strength parameter:
//!
//! ```text
//! F(x, t) = ε · (Σᵢ uᵢ cos(kᵢ x − ωᵢ t + φᵢ) − u₀)
//! ```

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Arguments of the trigonometric phase beyond this magnitude are reduced
/// modulo 2π before evaluation.
const PHASE_REDUCTION_THRESHOLD: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("lambda must be positive (got {0})")]
    NonPositiveLambda(f64),
    #[error("sigma must be positive (got {0})")]
    NonPositiveSigma(f64),
    #[error("epsilon must be non-negative and finite (got {0})")]
    InvalidEpsilon(f64),
    #[error("u0 must be finite (got {0})")]
    NonFiniteOffset(f64),
    #[error("wave {index}: {field} must be finite (got {value})")]
    NonFiniteWaveField {
        index: usize,
        field: &'static str,
        value: f64,
    },
    #[error("wave {index}: u must be non-negative (got {value}); flip the sign of k instead")]
    NegativeAmplitude { index: usize, value: f64 },
}

/// One travelling cosine component `u cos(k x − ω t + φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveParams {
    pub u: f64,
    pub k: f64,
    pub omega: f64,
    #[serde(default)]
    pub phi: f64,
}

impl WaveParams {
    pub fn new(u: f64, k: f64, omega: f64, phi: f64) -> Self {
        Self { u, k, omega, phi }
    }

    /// Unit amplitude, wavenumber and frequency with zero phase.
    pub fn unit() -> Self {
        Self::new(1.0, 1.0, 1.0, 0.0)
    }

    pub fn with_phase(self, phi: f64) -> Self {
        Self { phi, ..self }
    }

    #[inline]
    pub(crate) fn phase(&self, x: f64, t: f64) -> f64 {
        reduce_phase(self.k * x) - reduce_phase(self.omega * t) + self.phi
    }

    #[inline]
    pub fn velocity(&self, x: f64, t: f64) -> f64 {
        self.u * self.phase(x, t).cos()
    }

    #[inline]
    pub fn velocity_gradient(&self, x: f64, t: f64) -> f64 {
        -self.u * self.k * self.phase(x, t).sin()
    }
}

#[inline]
fn reduce_phase(arg: f64) -> f64 {
    if arg.abs() > PHASE_REDUCTION_THRESHOLD {
        arg.rem_euclid(TAU)
    } else {
        arg
    }
}

/// The full forcing: waves, constant offset and global strength ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forcing {
    pub waves: Vec<WaveParams>,
    pub u0: f64,
    pub epsilon: f64,
}

impl Forcing {
    pub fn new(waves: Vec<WaveParams>, u0: f64, epsilon: f64) -> Self {
        Self { waves, u0, epsilon }
    }

    pub fn single(wave: WaveParams, epsilon: f64) -> Self {
        Self::new(vec![wave], 0.0, epsilon)
    }

    pub fn none() -> Self {
        Self::new(Vec::new(), 0.0, 0.0)
    }

    pub fn with_offset(self, u0: f64) -> Self {
        Self { u0, ..self }
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }

    /// Same forcing with every wave phase replaced, in order.
    pub fn with_phases(&self, phases: &[f64]) -> Self {
        debug_assert_eq!(phases.len(), self.waves.len());
        Self {
            waves: self
                .waves
                .iter()
                .zip(phases)
                .map(|(w, &phi)| w.with_phase(phi))
                .collect(),
            ..self.clone()
        }
    }

    /// `ε·(Σᵢ uᵢ cos(kᵢx − ωᵢt + φᵢ) − u₀)`. The ε factor is included.
    #[inline]
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        let waves: f64 = self.waves.iter().map(|w| w.velocity(x, t)).sum();
        self.epsilon * (waves - self.u0)
    }

    /// Spatial derivative of [`Forcing::eval`]; the offset drops out.
    #[inline]
    pub fn eval_gradient(&self, x: f64, t: f64) -> f64 {
        let waves: f64 = self.waves.iter().map(|w| w.velocity_gradient(x, t)).sum();
        self.epsilon * waves
    }
}

pub fn eval_forcing(f: &Forcing, x: f64, t: f64) -> f64 {
    f.eval(x, t)
}

pub fn eval_forcing_gradient(f: &Forcing, x: f64, t: f64) -> f64 {
    f.eval_gradient(x, t)
}

/// Spring constant (inverse separation relaxation time) and noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DumbbellParams {
    pub lambda: f64,
    pub sigma: f64,
}

impl DumbbellParams {
    pub fn new(lambda: f64, sigma: f64) -> Self {
        Self { lambda, sigma }
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    /// Diffusivity of the dumbbell centre, `σ²/2`.
    pub fn centre_diffusivity(&self) -> f64 {
        0.5 * self.sigma * self.sigma
    }

    /// Diffusivity of either bead alone (spring removed), `σ²`.
    pub fn particle_diffusivity(&self) -> f64 {
        self.sigma * self.sigma
    }

    /// Stationary variance of the half-separation `U`, `σ²/(2λ)`.
    pub fn stationary_separation_variance(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.lambda)
    }

    /// `k²σ²`, the decay rate that appears throughout the drift kernels.
    pub fn dephasing_rate(&self, k: f64) -> f64 {
        k * k * self.sigma * self.sigma
    }
}

/// Bead positions at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DumbbellState {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl DumbbellState {
    pub fn new(x: f64, y: f64, t: f64) -> Self {
        Self { x, y, t }
    }

    /// Build from half-separation `u` and centre `v`.
    pub fn from_separation_centre(u: f64, v: f64, t: f64) -> Self {
        Self { x: v + u, y: v - u, t }
    }

    /// Half-separation `(x − y)/2`.
    #[inline]
    pub fn u(&self) -> f64 {
        0.5 * (self.x - self.y)
    }

    /// Centre `(x + y)/2`.
    #[inline]
    pub fn v(&self) -> f64 {
        0.5 * (self.x + self.y)
    }
}

/// Check both parameter sets and return copies with phases reduced to `[0, 2π)`.
pub fn validate(
    params: &DumbbellParams,
    forcing: &Forcing,
) -> Result<(DumbbellParams, Forcing), ModelError> {
    if !(params.lambda > 0.0 && params.lambda.is_finite()) {
        return Err(ModelError::NonPositiveLambda(params.lambda));
    }
    if !(params.sigma > 0.0 && params.sigma.is_finite()) {
        return Err(ModelError::NonPositiveSigma(params.sigma));
    }
    if !(forcing.epsilon >= 0.0 && forcing.epsilon.is_finite()) {
        return Err(ModelError::InvalidEpsilon(forcing.epsilon));
    }
    if !forcing.u0.is_finite() {
        return Err(ModelError::NonFiniteOffset(forcing.u0));
    }
    let mut waves = Vec::with_capacity(forcing.waves.len());
    for (index, w) in forcing.waves.iter().enumerate() {
        for (field, value) in [("u", w.u), ("k", w.k), ("omega", w.omega), ("phi", w.phi)] {
            if !value.is_finite() {
                return Err(ModelError::NonFiniteWaveField {
                    index,
                    field,
                    value,
                });
            }
        }
        if w.u < 0.0 {
            return Err(ModelError::NegativeAmplitude { index, value: w.u });
        }
        waves.push(w.with_phase(normalize_phase(w.phi)));
    }
    Ok((*params, Forcing { waves, ..forcing.clone() }))
}

/// Reduce an angle into `[0, 2π)`.
/// Shortest round-trip text for a float, with an exponent where that is
/// shorter (`1.5e-13` rather than `0.00000000000015`). Used by every CSV writer.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        serde_json::to_string(&x).expect("finite floats serialize")
    } else {
        x.to_string()
    }
}

pub fn normalize_phase(phi: f64) -> f64 {
    let r = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Flat JSON parameter document: `lambda, sigma, epsilon, u0, waves[{u,k,omega,phi}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsDocument {
    pub lambda: f64,
    pub sigma: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub u0: f64,
    #[serde(default)]
    pub waves: Vec<WaveParams>,
}

impl ParamsDocument {
    pub fn from_parts(params: &DumbbellParams, forcing: &Forcing) -> Self {
        Self {
            lambda: params.lambda,
            sigma: params.sigma,
            epsilon: forcing.epsilon,
            u0: forcing.u0,
            waves: forcing.waves.clone(),
        }
    }

    pub fn to_parts(&self) -> Result<(DumbbellParams, Forcing), ModelError> {
        validate(
            &DumbbellParams::new(self.lambda, self.sigma),
            &Forcing::new(self.waves.clone(), self.u0, self.epsilon),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn forcing_examples() {
        let f = Forcing::single(WaveParams::unit(), 1.0);
        assert_eq!(f.eval(0.0, 0.0), 1.0);

        let offset_only = Forcing::new(vec![], 0.3, 0.5);
        assert!((offset_only.eval(12.3, -4.0) + 0.15).abs() < 1e-15);

        let quarter = Forcing::single(WaveParams::unit().with_phase(PI / 2.0), 1.0);
        assert!(quarter.eval(0.0, 0.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_examples() {
        let f = Forcing::single(WaveParams::unit(), 1.0);
        assert!((f.eval_gradient(PI / 2.0, 0.0) + 1.0).abs() < 1e-15);

        let off = Forcing::single(WaveParams::new(2.0, 3.0, 0.7, 1.1), 0.0).with_offset(0.4);
        assert_eq!(off.eval_gradient(0.3, 2.0), 0.0);
        assert_eq!(off.eval(0.3, 2.0), 0.0);
    }

    #[test]
    fn offset_has_no_gradient() {
        let f = Forcing::new(vec![], 0.7, 1.0);
        assert_eq!(f.eval_gradient(1.0, 1.0), 0.0);
    }

    #[test]
    fn validate_accepts_unit_wave() {
        let p = DumbbellParams::new(1.0, 1.0);
        let f = Forcing::single(WaveParams::unit(), 0.5);
        assert!(validate(&p, &f).is_ok());
    }

    #[test]
    fn validate_rejects_zero_lambda() {
        let p = DumbbellParams::new(0.0, 1.0);
        let err = validate(&p, &Forcing::none()).unwrap_err();
        assert!(err.to_string().contains("lambda must be positive"));
    }

    #[test]
    fn validate_rejects_bad_fields() {
        let p = DumbbellParams::new(1.0, 1.0);
        let e = validate(&DumbbellParams::new(1.0, -1.0), &Forcing::none()).unwrap_err();
        assert!(e.to_string().contains("sigma"));
        let e = validate(&p, &Forcing::none().with_epsilon(-0.1)).unwrap_err();
        assert!(e.to_string().contains("epsilon"));
        let e = validate(&p, &Forcing::single(WaveParams::new(1.0, f64::NAN, 1.0, 0.0), 1.0))
            .unwrap_err();
        assert!(matches!(
            e,
            ModelError::NonFiniteWaveField { index: 0, field: "k", .. }
        ));
        assert!(e.to_string().contains("wave 0: k"));
        let e = validate(&p, &Forcing::single(WaveParams::new(-1.0, 1.0, 1.0, 0.0), 1.0))
            .unwrap_err();
        assert!(e.to_string().contains("non-negative"));
        let e = validate(&p, &Forcing::none().with_offset(f64::INFINITY)).unwrap_err();
        assert!(e.to_string().contains("u0"));
    }

    #[test]
    fn validate_normalizes_phase() {
        let p = DumbbellParams::new(1.0, 1.0);
        let f = Forcing::single(WaveParams::unit().with_phase(7.0), 1.0);
        let (_, f) = validate(&p, &f).unwrap();
        assert!((f.waves[0].phi - (7.0 - TAU)).abs() < 1e-15);
        assert_eq!(normalize_phase(-1e-300), 0.0);
        assert!((normalize_phase(-PI) - PI).abs() < 1e-15);
    }

    #[test]
    fn derived_accessors() {
        let p = DumbbellParams::new(2.0, 3.0);
        assert_eq!(p.centre_diffusivity(), 4.5);
        assert_eq!(p.particle_diffusivity(), 9.0);
        assert_eq!(p.stationary_separation_variance(), 9.0 / 4.0);
    }

    #[test]
    fn huge_positions_are_phase_reduced() {
        let w = WaveParams::unit();
        let x: f64 = 4.0e12;
        let direct = (x.rem_euclid(TAU)).cos();
        assert!((w.velocity(x, 0.0) - direct).abs() < 1e-12);
    }

    #[test]
    fn params_document_field_names() {
        let doc: ParamsDocument = serde_json::from_str(
            r#"{"lambda":1.0,"sigma":1.0,"epsilon":0.5,"u0":0.1,
                "waves":[{"u":1.0,"k":1.0,"omega":1.0,"phi":0.0}]}"#,
        )
        .unwrap();
        let (p, f) = doc.to_parts().unwrap();
        assert_eq!(p, DumbbellParams::new(1.0, 1.0));
        assert_eq!(f.waves.len(), 1);
        let bad = serde_json::from_str::<ParamsDocument>(
            r#"{"lambda":1.0,"sigma":1.0,"epsilon":0.5,"lamda":2.0}"#,
        );
        assert!(bad.is_err());
        let missing = serde_json::from_str::<ParamsDocument>(r#"{"sigma":1.0,"epsilon":0.5}"#)
            .unwrap_err();
        assert!(missing.to_string().contains("lambda"));
    }
}
