//! Drift estimates from trajectories, λ-sweeps and cross-engine comparison.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asymptotics::{self, AsymptoticsError, QuadratureConfig};
use crate::model::{format_float, DumbbellParams, Forcing};
use crate::sde_sim::{self, SimConfig, SimError, Trajectory};

/// Verdict threshold on |z|.
pub const PASS_Z: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Asymptotics(#[from] AsymptoticsError),
    #[error("need at least {needed} trajectories for a standard error (got {got})")]
    TooFewReplicas { needed: usize, got: usize },
    #[error("trajectory {replica_id} ran for {got}, expected {expected}")]
    MismatchedHorizon {
        replica_id: u64,
        expected: f64,
        got: f64,
    },
    #[error("batch means need at least {needed} recorded samples (got {got})")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid species list: {0}")]
    InvalidSpecies(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MonteCarlo,
    BatchMeans,
    Asymptotic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftEstimate {
    pub mean_drift: f64,
    pub std_error: f64,
    pub replicas: usize,
    pub t_final: f64,
    pub method: Method,
}

/// Running count, mean and centred sum of squares.
///
/// Merging is associative up to rounding; callers fold in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub m2: f64,
}

impl Summary {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(self, other: Summary) -> Summary {
        if self.count == 0 {
            return other;
        }
        if other.count == 0 {
            return self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2
            + other.m2
            + delta * delta * (self.count as f64 * other.count as f64) / count as f64;
        Summary { count, mean, m2 }
    }

    /// Sample variance, `n − 1` denominator.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            f64::NAN
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

impl FromIterator<f64> for Summary {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Summary::default();
        for x in iter {
            s.push(x);
        }
        s
    }
}

/// Mean over replicas of `(v_final − v_initial)/t_final`, with replica SE.
pub fn estimate_drift(trajectories: &[Trajectory]) -> Result<DriftEstimate, EstimatorError> {
    if trajectories.len() < 2 {
        return Err(EstimatorError::TooFewReplicas {
            needed: 2,
            got: trajectories.len(),
        });
    }
    let horizon = trajectories[0].elapsed();
    for tr in trajectories {
        if tr.elapsed() != horizon {
            return Err(EstimatorError::MismatchedHorizon {
                replica_id: tr.replica_id,
                expected: horizon,
                got: tr.elapsed(),
            });
        }
    }
    let summary: Summary = trajectories.iter().map(Trajectory::drift).collect();
    Ok(DriftEstimate {
        mean_drift: summary.mean,
        std_error: summary.std_error(),
        replicas: trajectories.len(),
        t_final: horizon,
        method: Method::MonteCarlo,
    })
}

/// Mean and batch-means standard error of a stationary series.
///
/// Trailing values that do not fill a whole batch are dropped.
pub fn batch_means(series: &[f64], batches: usize) -> Result<(f64, f64), EstimatorError> {
    if batches < 2 || series.len() < batches {
        return Err(EstimatorError::TooFewSamples {
            needed: batches.max(2),
            got: series.len(),
        });
    }
    let len = series.len() / batches;
    let summary: Summary = series
        .chunks_exact(len)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / len as f64)
        .collect();
    Ok((summary.mean, summary.std_error()))
}

/// Drift of a single long recorded run with a batch-means standard error.
///
/// The recorded samples are cut into `batches` equal stretches; each stretch
/// gives one drift, and the spread of those gives the error.
pub fn batch_means_drift(
    trajectory: &Trajectory,
    batches: usize,
) -> Result<DriftEstimate, EstimatorError> {
    let samples = trajectory.samples.as_deref().unwrap_or(&[]);
    if batches < 2 || samples.len() < batches + 1 {
        return Err(EstimatorError::TooFewSamples {
            needed: batches.max(2) + 1,
            got: samples.len(),
        });
    }
    let stride = (samples.len() - 1) / batches;
    let summary: Summary = (0..batches)
        .map(|b| {
            let (s0, s1) = (&samples[b * stride], &samples[(b + 1) * stride]);
            (s1.v() - s0.v()) / (s1.t - s0.t)
        })
        .collect();
    let first = &samples[0];
    let last = &samples[batches * stride];
    Ok(DriftEstimate {
        mean_drift: (last.v() - first.v()) / (last.t - first.t),
        std_error: summary.std_error(),
        replicas: 1,
        t_final: last.t - first.t,
        method: Method::BatchMeans,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub z: f64,
    pub combined_error: f64,
    pub pass: bool,
}

/// `z = (mean − predicted)/√(SE² + quad_err²)`; pass iff `|z| ≤ 3`.
pub fn compare(mc: &DriftEstimate, predicted: f64, quad_err: f64) -> Comparison {
    let combined_error = mc.std_error.hypot(quad_err);
    let diff = mc.mean_drift - predicted;
    let z = if diff == 0.0 { 0.0 } else { diff / combined_error };
    Comparison {
        z,
        combined_error,
        pass: z.abs() <= PASS_Z,
    }
}

fn run_point(
    f: &Forcing,
    p: &DumbbellParams,
    c: &SimConfig,
    q: &QuadratureConfig,
) -> Result<(DriftEstimate, asymptotics::DriftPrediction), EstimatorError> {
    let prediction = asymptotics::predict_total_drift(f, p, q)?;
    let trajectories = sde_sim::simulate_ensemble(f, p, c)?;
    Ok((estimate_drift(&trajectories)?, prediction))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub mc: Vec<Option<DriftEstimate>>,
    pub asym: Vec<Option<f64>>,
    pub quad_err: Vec<Option<f64>>,
    pub z_scores: Vec<Option<f64>>,
    /// Failure message for points that could not be evaluated.
    pub failures: Vec<Option<String>>,
}

impl SweepResult {
    pub fn has_failures(&self) -> bool {
        self.failures.iter().any(Option::is_some)
    }

    /// Fraction of evaluated points with `|z| ≤ threshold`.
    pub fn fraction_within(&self, threshold: f64) -> f64 {
        let zs: Vec<f64> = self.z_scores.iter().flatten().copied().collect();
        if zs.is_empty() {
            return 0.0;
        }
        zs.iter().filter(|z| z.abs() <= threshold).count() as f64 / zs.len() as f64
    }

    /// CSV: `lambda,mc_drift,mc_se,asym_drift,quad_err,z,status`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for i in 0..self.grid.len() {
            let mc = self.mc[i];
            write_row(
                &mut w,
                self.grid[i],
                mc.map(|m| m.mean_drift),
                mc.map(|m| m.std_error),
                self.asym[i],
                self.quad_err[i],
                self.z_scores[i],
                self.failures[i].as_deref(),
            )?;
        }
        Ok(())
    }
}

pub const CSV_HEADER: &str = "lambda,mc_drift,mc_se,asym_drift,quad_err,z,status";

#[allow(clippy::too_many_arguments)]
fn write_row<W: Write>(
    w: &mut W,
    lambda: f64,
    mc: Option<f64>,
    se: Option<f64>,
    asym: Option<f64>,
    quad_err: Option<f64>,
    z: Option<f64>,
    failure: Option<&str>,
) -> io::Result<()> {
    let cell = |v: Option<f64>| v.map(format_float).unwrap_or_default();
    let status = match failure {
        None => "ok".to_string(),
        // keep the field CSV-safe
        Some(msg) => format!("\"error: {}\"", msg.replace('"', "'")),
    };
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        format_float(lambda),
        cell(mc),
        cell(se),
        cell(asym),
        cell(quad_err),
        cell(z),
        status
    )
}

/// MC estimate and asymptotic prediction at each λ of `grid`.
///
/// Point `i` uses master seed `derive_seed(c.seed, i)`. Failures are recorded
/// per point and do not stop the sweep.
pub fn sweep_lambda(
    grid: &[f64],
    f: &Forcing,
    base: &DumbbellParams,
    c: &SimConfig,
    q: &QuadratureConfig,
) -> SweepResult {
    let mut out = SweepResult {
        grid: grid.to_vec(),
        mc: Vec::with_capacity(grid.len()),
        asym: Vec::with_capacity(grid.len()),
        quad_err: Vec::with_capacity(grid.len()),
        z_scores: Vec::with_capacity(grid.len()),
        failures: Vec::with_capacity(grid.len()),
    };
    for (i, &lambda) in grid.iter().enumerate() {
        let p = base.with_lambda(lambda);
        let point_config = SimConfig {
            seed: sde_sim::derive_seed(c.seed, i as u64),
            ..*c
        };
        match run_point(f, &p, &point_config, q) {
            Ok((mc, pred)) => {
                let cmp = compare(&mc, pred.total_drift, pred.quadrature_error_estimate);
                out.mc.push(Some(mc));
                out.asym.push(Some(pred.total_drift));
                out.quad_err.push(Some(pred.quadrature_error_estimate));
                out.z_scores.push(cmp.z.is_finite().then_some(cmp.z));
                out.failures.push(None);
            }
            Err(e) => {
                // keep whatever half still evaluates
                let pred = asymptotics::predict_total_drift(f, &p, q).ok();
                out.mc.push(None);
                out.asym.push(pred.as_ref().map(|p| p.total_drift));
                out.quad_err.push(pred.as_ref().map(|p| p.quadrature_error_estimate));
                out.z_scores.push(None);
                out.failures.push(Some(e.to_string()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanoutRow {
    pub lambda: f64,
    pub sigma: f64,
    pub mc: DriftEstimate,
    pub asym_drift: f64,
    pub quad_err: f64,
    pub z: f64,
    /// `|mc drift| > 3·SE`.
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanoutTable {
    pub rows: Vec<FanoutRow>,
    pub predicted_signs_differ: bool,
    pub mc_signs_differ: bool,
    /// MC signs differ and every species is resolved from zero.
    pub sign_split_resolved: bool,
}

impl FanoutTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            write_row(
                &mut w,
                r.lambda,
                Some(r.mc.mean_drift),
                Some(r.mc.std_error),
                Some(r.asym_drift),
                Some(r.quad_err),
                Some(r.z),
                None,
            )?;
        }
        Ok(())
    }
}

fn signs_differ(values: impl Iterator<Item = f64>) -> bool {
    let (mut pos, mut neg) = (false, false);
    for v in values {
        pos |= v > 0.0;
        neg |= v < 0.0;
    }
    pos && neg
}

/// Drift of several species (same σ, different λ) under one forcing.
///
/// Species `i` uses master seed `derive_seed(c.seed, i)`.
pub fn fanout_experiment(
    species: &[DumbbellParams],
    f: &Forcing,
    c: &SimConfig,
    q: &QuadratureConfig,
) -> Result<FanoutTable, EstimatorError> {
    let Some(first) = species.first() else {
        return Err(EstimatorError::InvalidSpecies("no species given".into()));
    };
    if species.iter().any(|s| s.sigma != first.sigma) {
        return Err(EstimatorError::InvalidSpecies(
            "all species must share sigma".into(),
        ));
    }
    let mut rows = Vec::with_capacity(species.len());
    for (i, p) in species.iter().enumerate() {
        let config = SimConfig {
            seed: sde_sim::derive_seed(c.seed, i as u64),
            ..*c
        };
        let (mc, pred) = run_point(f, p, &config, q)?;
        let cmp = compare(&mc, pred.total_drift, pred.quadrature_error_estimate);
        rows.push(FanoutRow {
            lambda: p.lambda,
            sigma: p.sigma,
            resolved: mc.mean_drift.abs() > PASS_Z * mc.std_error,
            mc,
            asym_drift: pred.total_drift,
            quad_err: pred.quadrature_error_estimate,
            z: cmp.z,
        });
    }
    let predicted_signs_differ = signs_differ(rows.iter().map(|r| r.asym_drift));
    let mc_signs_differ = signs_differ(rows.iter().map(|r| r.mc.mean_drift));
    Ok(FanoutTable {
        predicted_signs_differ,
        mc_signs_differ,
        sign_split_resolved: mc_signs_differ && rows.iter().all(|r| r.resolved),
        rows,
    })
}
