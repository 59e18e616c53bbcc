//! The `dumbbell-drift` command line.
//!
//! Every subcommand reads one flat JSON config (`--config`), applies flag
//! overrides on top of it and rejects unknown keys. Results go to stdout as
//! JSON (or CSV for tables); with `--out` the primary artifact is written to a
//! file together with a `<out>.manifest.json` that a later `rerun` can replay
//! exactly.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::asymptotics::{self, AsymptoticsError, DriftPrediction, QuadratureConfig};
use crate::estimator::{self, EstimatorError, SweepResult};
use crate::model::{self, format_float, DumbbellParams, Forcing, ModelError, WaveParams};
use crate::sde_sim::{self, Scheme, SimConfig, SimError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_COMPARISON: i32 = 4;

/// Samples kept per replica when a single-replica run records automatically.
const AUTO_RECORD_SAMPLES: u64 = 10_000;

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

const CONFIG_HELP: &str = "\
CONFIG KEYS (JSON object; unknown keys are rejected; defaults in brackets):
  lambda            spring constant, > 0 (required; sweep and fanout take
                    theirs from lambda_grid and species)
  sigma             noise scale, > 0 (required)
  epsilon           forcing strength (required)
  u0                constant offset subtracted from the wave field [0]
  waves             list of {\"u\", \"k\", \"omega\", \"phi\"}, phi optional [0] [[]]
  dt                time step [0.001]
  t_final           simulated time per replica [100000]
  seed              master seed [0]
  replicas          independent replicas; 1 switches to batch means [64]
  record_every      keep every n-th state, 0 keeps endpoints only [0]
  batches           batch count for single-replica runs [20]
  scheme            \"euler-maruyama\" or \"splitting\" [euler-maruyama]
  random_phase      draw fresh wave phases per replica [true]
  lambda_grid       sweep grid: a list of values or a log-spaced
                    {\"from\", \"to\", \"points\"} [{\"from\": 0.01, \"to\": 100, \"points\": 41}]
  species           spring constants of the fanout species (list)
  tune_u0           fanout: replace u0 by the midpoint of the sign-reversal
                    interval over lambda_grid [false]
  quadrature        {\"rel_tol\" [1e-9], \"abs_tol\" [1e-12],
                     \"envelope_cutoff\" [40], \"max_subdivisions\" [4000]}

Flags override the file. Without --config the flags must supply lambda, sigma
and epsilon.

EXIT STATUS: 0 success, 2 configuration error, 3 numerical failure,
4 comparison failure (mc --compare-asymptotic)";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Config(_) | CliError::Io { .. } => EXIT_CONFIG,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<AsymptoticsError> for CliError {
    fn from(e: AsymptoticsError) -> Self {
        match e {
            AsymptoticsError::QuadratureBudget { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::Sim(e) => e.into(),
            EstimatorError::Asymptotics(e) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Log-spaced grid from `from` to `to` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogGrid {
    pub from: f64,
    pub to: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaGrid {
    List(Vec<f64>),
    Log(LogGrid),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Log(LogGrid {
            from: 1e-2,
            to: 1e2,
            points: 41,
        })
    }
}

impl LambdaGrid {
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        let values = match self {
            LambdaGrid::List(v) => v.clone(),
            LambdaGrid::Log(g) => {
                if !(g.from > 0.0 && g.to > 0.0 && g.from.is_finite() && g.to.is_finite()) {
                    return Err(CliError::Config(
                        "lambda_grid: from and to must be positive and finite".into(),
                    ));
                }
                match g.points {
                    0 => Vec::new(),
                    1 => vec![g.from],
                    n => {
                        let (a, b) = (g.from.log10(), g.to.log10());
                        (0..n)
                            .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
                            .collect()
                    }
                }
            }
        };
        if values.is_empty() {
            return Err(CliError::Config("lambda_grid: grid is empty".into()));
        }
        Ok(values)
    }
}

fn default_dt() -> f64 {
    SimConfig::default().dt
}
fn default_t_final() -> f64 {
    SimConfig::default().t_final
}
fn default_replicas() -> usize {
    SimConfig::default().replicas
}
fn default_batches() -> usize {
    20
}
fn default_true() -> bool {
    true
}

/// The resolved run configuration; also the `config` echo of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub sigma: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub u0: f64,
    #[serde(default)]
    pub waves: Vec<WaveParams>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub record_every: u64,
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_true")]
    pub random_phase: bool,
    #[serde(default)]
    pub lambda_grid: LambdaGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<Vec<f64>>,
    #[serde(default)]
    pub tune_u0: bool,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
}

impl RunConfig {
    /// Parse a JSON document; errors name the offending key.
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        serde_json::from_value(v).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Validated dumbbell and forcing; `lambda` must be set.
    pub fn parts(&self) -> Result<(DumbbellParams, Forcing), CliError> {
        let lambda = self
            .lambda
            .ok_or_else(|| CliError::Config("config: missing field `lambda`".into()))?;
        let p = DumbbellParams::new(lambda, self.sigma);
        let f = Forcing::new(self.waves.clone(), self.u0, self.epsilon);
        Ok(model::validate(&p, &f)?)
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            dt: self.dt,
            t_final: self.t_final,
            seed: self.seed,
            replicas: self.replicas,
            record_every: self.record_every,
            scheme: self.scheme,
            random_phase: self.random_phase,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dumbbell-drift",
    version,
    about = "Stochastic Stokes' drift of an elastic dumbbell: quadrature and Monte Carlo",
    after_help = CONFIG_HELP
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Leading-order drift by quadrature, as JSON.
    #[command(after_help = CONFIG_HELP)]
    Asymptotic {
        #[command(flatten)]
        common: CommonArgs,
        /// Write (beta, M(beta)) samples of every wave to this CSV.
        #[arg(long, value_name = "PATH")]
        dump_m_of_beta: Option<PathBuf>,
        /// Largest beta in the dump [10 dephasing times].
        #[arg(long, value_name = "X")]
        beta_max: Option<f64>,
        /// Samples per wave in the dump.
        #[arg(long, value_name = "N", default_value_t = 201)]
        beta_points: usize,
    },
    /// Monte Carlo drift estimate, as JSON; --out writes replica records.
    #[command(after_help = CONFIG_HELP)]
    Mc {
        #[command(flatten)]
        common: CommonArgs,
        /// Also evaluate the quadrature and exit 4 unless |z| <= 3.
        #[arg(long)]
        compare_asymptotic: bool,
        /// Validate and report the planned work without simulating.
        #[arg(long)]
        dry_run: bool,
    },
    /// Monte Carlo and quadrature over lambda_grid, as CSV.
    #[command(after_help = CONFIG_HELP)]
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Quadrature column only.
        #[arg(long)]
        no_mc: bool,
        #[arg(long)]
        dry_run: bool,
    },
    /// Drift of several species under one forcing, as CSV.
    #[command(after_help = CONFIG_HELP)]
    Fanout {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dry_run: bool,
    },
    /// Strong- and weak-spring closed forms, as JSON.
    #[command(after_help = CONFIG_HELP)]
    Limits {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Replay a run from its manifest.
    #[command(after_help = CONFIG_HELP)]
    Rerun {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Where to write the replayed outputs (nothing is written without it).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        threads: Option<usize>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "X", allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, value_name = "X", allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    #[arg(long, value_name = "X", allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    #[arg(long, value_name = "X", allow_negative_numbers = true)]
    pub u0: Option<f64>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "X", allow_negative_numbers = true)]
    pub dt: Option<f64>,
    #[arg(long, value_name = "X", allow_negative_numbers = true)]
    pub t_final: Option<f64>,
    #[arg(long, value_name = "N")]
    pub replicas: Option<usize>,
    /// Primary output file; a manifest is written next to it.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

impl CommonArgs {
    /// Config file (or an empty object) with the flag overrides applied.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut doc = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => json!({}),
        };
        let Some(obj) = doc.as_object_mut() else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        let overrides = [
            ("lambda", self.lambda.map(Value::from)),
            ("sigma", self.sigma.map(Value::from)),
            ("epsilon", self.epsilon.map(Value::from)),
            ("u0", self.u0.map(Value::from)),
            ("seed", self.seed.map(Value::from)),
            ("dt", self.dt.map(Value::from)),
            ("t_final", self.t_final.map(Value::from)),
            ("replicas", self.replicas.map(Value::from)),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                if v.is_null() {
                    return Err(CliError::Config(format!("--{key} must be finite")));
                }
                obj.insert(key.to_string(), v);
            }
        }
        RunConfig::from_value(doc)
    }
}

/// What a run does, as replayed by `rerun`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Job {
    Asymptotic {
        dump_m_of_beta: Option<PathBuf>,
        beta_max: Option<f64>,
        beta_points: usize,
    },
    Mc {
        compare_asymptotic: bool,
    },
    Sweep {
        no_mc: bool,
    },
    Fanout,
    Limits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub job: Job,
    /// Fully resolved configuration, flag overrides included.
    pub config: RunConfig,
    pub seed: u64,
    /// Wall-clock seconds per phase.
    pub timing: BTreeMap<String, f64>,
    pub outputs: Vec<PathBuf>,
    pub exit_code: i32,
    /// Command line that produced the run (informational).
    pub command_line: Vec<String>,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Result of one job, before anything is printed.
#[derive(Debug, Default)]
struct Outcome {
    stdout: String,
    /// Warnings for stderr.
    notes: Vec<String>,
    /// Plain informational lines for stderr.
    info: Vec<String>,
    outputs: Vec<PathBuf>,
    timing: BTreeMap<String, f64>,
    exit_code: i32,
}

impl Outcome {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(path, bytes).map_err(io_err(path))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let r = f();
        *self.timing.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
        r
    }
}

fn to_json(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

/// Run `args` (program name first) and return the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                EXIT_CONFIG
            } else {
                let _ = write!(stdout, "{text}");
                EXIT_OK
            };
        }
    };
    let command_line = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, command_line, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(
    command: Command,
    command_line: Vec<String>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<i32, CliError> {
    let (job, config, out, threads, dry_run) = match command {
        Command::Asymptotic {
            common,
            dump_m_of_beta,
            beta_max,
            beta_points,
        } => (
            Job::Asymptotic {
                dump_m_of_beta,
                beta_max,
                beta_points,
            },
            common.resolve()?,
            common.out,
            common.threads,
            false,
        ),
        Command::Mc {
            common,
            compare_asymptotic,
            dry_run,
        } => (
            Job::Mc { compare_asymptotic },
            common.resolve()?,
            common.out,
            common.threads,
            dry_run,
        ),
        Command::Sweep {
            common,
            no_mc,
            dry_run,
        } => (Job::Sweep { no_mc }, common.resolve()?, common.out, common.threads, dry_run),
        Command::Fanout { common, dry_run } => {
            (Job::Fanout, common.resolve()?, common.out, common.threads, dry_run)
        }
        Command::Limits { common } => {
            (Job::Limits, common.resolve()?, common.out, common.threads, false)
        }
        Command::Rerun {
            manifest,
            out,
            threads,
        } => {
            let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
            let m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", manifest.display())))?;
            let job = match m.job {
                // the dump is an inspection aid, not a reproducible artifact
                Job::Asymptotic {
                    beta_max,
                    beta_points,
                    ..
                } => Job::Asymptotic {
                    dump_m_of_beta: None,
                    beta_max,
                    beta_points,
                },
                other => other,
            };
            (job, m.config, out, threads, false)
        }
    };

    let execute = || execute(&job, config.clone(), out.as_deref(), dry_run);
    let (resolved, mut outcome) = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?
            .install(execute)?,
        None => execute()?,
    };

    for note in &outcome.notes {
        let _ = writeln!(stderr, "warning: {note}");
    }
    for line in &outcome.info {
        let _ = writeln!(stderr, "{line}");
    }
    if let Some(out) = out.as_deref().filter(|_| !dry_run) {
        let manifest = RunManifest {
            version: VERSION.to_string(),
            job,
            seed: resolved.seed,
            config: resolved,
            timing: std::mem::take(&mut outcome.timing),
            outputs: outcome.outputs.clone(),
            exit_code: outcome.exit_code,
            command_line,
        };
        let path = manifest_path(out);
        fs::write(&path, to_json(&manifest)).map_err(io_err(&path))?;
    }
    stdout
        .write_all(outcome.stdout.as_bytes())
        .map_err(io_err(Path::new("<stdout>")))?;
    Ok(outcome.exit_code)
}

/// Run one job; returns the configuration as actually used.
fn execute(
    job: &Job,
    mut cfg: RunConfig,
    out: Option<&Path>,
    dry_run: bool,
) -> Result<(RunConfig, Outcome), CliError> {
    let mut o = Outcome::default();
    // sweep and fanout set their own spring constants
    let own_lambda = match job {
        Job::Sweep { .. } => cfg.lambda_grid.values()?.first().copied(),
        Job::Fanout => cfg.species.as_ref().and_then(|s| s.first().copied()),
        _ => None,
    };
    let (p, f) = match (cfg.lambda, own_lambda) {
        (None, Some(l)) => RunConfig { lambda: Some(l), ..cfg.clone() }.parts()?,
        _ => cfg.parts()?,
    };
    cfg.quadrature.validate()?;
    match job {
        Job::Asymptotic {
            dump_m_of_beta,
            beta_max,
            beta_points,
        } => {
            let q = cfg.quadrature;
            let prediction = o.time("quadrature", || asymptotics::predict_total_drift(&f, &p, &q))?;
            o.stdout = to_json(&json!({
                "command": "asymptotic",
                "lambda": p.lambda,
                "prediction": prediction,
            }));
            if let Some(path) = dump_m_of_beta {
                let bytes = o.time("m_of_beta", || {
                    dump_drift_density(&f, &p, &q, *beta_max, *beta_points)
                })?;
                o.write(path, &bytes)?;
            }
            if let Some(out) = out {
                let bytes = o.stdout.clone().into_bytes();
                o.write(out, &bytes)?;
            }
        }
        Job::Limits => {
            let strong: Vec<f64> = f.waves.iter().map(|w| asymptotics::drift_strong_spring(w, &p)).collect();
            let weak: Vec<f64> = f.waves.iter().map(|w| asymptotics::drift_weak_spring(w, &p)).collect();
            let total = |per_wave: &[f64]| DriftPrediction::reconstruct(f.epsilon, -f.u0, per_wave);
            o.stdout = to_json(&json!({
                "command": "limits",
                "strong_spring": { "per_wave_order2": strong, "total_drift": total(&strong) },
                "weak_spring": { "per_wave_order2": weak, "total_drift": total(&weak) },
            }));
            if let Some(out) = out {
                let bytes = o.stdout.clone().into_bytes();
                o.write(out, &bytes)?;
            }
        }
        Job::Mc { compare_asymptotic } => {
            let mut c = cfg.sim();
            c.validate(&p)?;
            if c.replicas == 1 && c.record_every == 0 {
                c.record_every = (c.steps() / AUTO_RECORD_SAMPLES).max(1);
                cfg.record_every = c.record_every;
                o.notes.push(format!(
                    "single replica: recording every {} steps for batch means",
                    c.record_every
                ));
            }
            o.notes.extend(c.warnings(&p, &f));
            if dry_run {
                o.stdout = plan_json("mc", &[(p, c)]);
                return Ok((cfg, o));
            }
            let trajectories = o.time("monte_carlo", || sde_sim::simulate_ensemble(&f, &p, &c))?;
            let estimate = if c.replicas == 1 {
                estimator::batch_means_drift(&trajectories[0], cfg.batches)?
            } else {
                estimator::estimate_drift(&trajectories)?
            };
            if !(estimate.mean_drift.is_finite() && estimate.std_error.is_finite()) {
                return Err(CliError::Numerical(format!(
                    "Monte Carlo produced a non-finite drift ({} ± {})",
                    estimate.mean_drift, estimate.std_error
                )));
            }
            let mut comparison = Value::Null;
            if *compare_asymptotic {
                let q = cfg.quadrature;
                let pred = o.time("quadrature", || asymptotics::predict_total_drift(&f, &p, &q))?;
                let cmp = estimator::compare(
                    &estimate,
                    pred.total_drift,
                    pred.quadrature_error_estimate,
                );
                if !cmp.pass {
                    o.exit_code = EXIT_COMPARISON;
                }
                comparison = json!({
                    "predicted": pred.total_drift,
                    "quad_err": pred.quadrature_error_estimate,
                    "z": cmp.z,
                    "combined_error": cmp.combined_error,
                    "pass": cmp.pass,
                });
            }
            o.stdout = to_json(&json!({
                "command": "mc",
                "estimate": estimate,
                "comparison": comparison,
            }));
            if let Some(out) = out {
                let records = csv_bytes(|b| sde_sim::write_final_records(b, &trajectories));
                o.write(out, &records)?;
                if trajectories.iter().any(|t| t.samples.is_some()) {
                    let samples = csv_bytes(|b| sde_sim::write_samples(b, &trajectories));
                    o.write(&sibling(out, ".samples.csv"), &samples)?;
                }
            }
        }
        Job::Sweep { no_mc } => {
            let grid = cfg.lambda_grid.values()?;
            let c = cfg.sim();
            let q = cfg.quadrature;
            let result = if *no_mc {
                o.time("quadrature", || quadrature_sweep(&grid, &f, &p, &q))
            } else {
                let plan: Vec<_> = grid.iter().map(|&l| (p.with_lambda(l), c)).collect();
                for (pp, cc) in &plan {
                    o.notes.extend(cc.warnings(pp, &f));
                }
                if dry_run {
                    o.stdout = plan_json("sweep", &plan);
                    return Ok((cfg, o));
                }
                o.time("sweep", || estimator::sweep_lambda(&grid, &f, &p, &c, &q))
            };
            let csv = csv_bytes(|b| result.write_csv(b));
            let failures = result.failures.iter().flatten().count();
            if failures > 0 {
                o.exit_code = EXIT_NUMERICAL;
                o.notes.push(format!("{failures} of {} sweep points failed", grid.len()));
            }
            match out {
                Some(out) => {
                    o.write(out, &csv)?;
                    o.stdout = to_json(&json!({
                        "command": "sweep",
                        "points": grid.len(),
                        "failures": failures,
                        "fraction_within_3": (!*no_mc).then(|| result.fraction_within(estimator::PASS_Z)),
                    }));
                }
                None => o.stdout = String::from_utf8(csv).expect("CSV is UTF-8"),
            }
        }
        Job::Fanout => {
            let Some(species) = cfg.species.clone() else {
                return Err(CliError::Config("fanout needs `species`".into()));
            };
            let mut f = f;
            if cfg.tune_u0 {
                let grid: Vec<_> = cfg
                    .lambda_grid
                    .values()?
                    .into_iter()
                    .map(|l| p.with_lambda(l))
                    .collect();
                let q = cfg.quadrature;
                let reversal =
                    o.time("quadrature", || asymptotics::find_sign_reversal_offset(&grid, &f, &q))?;
                let Some(mid) = reversal.midpoint() else {
                    return Err(CliError::Numerical(
                        "tune_u0: the drift is monotone over lambda_grid; no sign-reversal offset exists".into(),
                    ));
                };
                cfg.u0 = mid;
                cfg.tune_u0 = false;
                f = f.with_offset(mid);
            }
            let params: Vec<_> = species.iter().map(|&l| p.with_lambda(l)).collect();
            let c = cfg.sim();
            let plan: Vec<_> = params.iter().map(|&pp| (pp, c)).collect();
            for (pp, cc) in &plan {
                cc.validate(pp)?;
                o.notes.extend(cc.warnings(pp, &f));
            }
            if dry_run {
                o.stdout = plan_json("fanout", &plan);
                return Ok((cfg, o));
            }
            let q = cfg.quadrature;
            let table = o.time("monte_carlo", || estimator::fanout_experiment(&params, &f, &c, &q))?;
            let csv = csv_bytes(|b| table.write_csv(b));
            let summary = json!({
                "command": "fanout",
                "u0": f.u0,
                "predicted_signs_differ": table.predicted_signs_differ,
                "mc_signs_differ": table.mc_signs_differ,
                "sign_split_resolved": table.sign_split_resolved,
            });
            match out {
                Some(out) => {
                    o.write(out, &csv)?;
                    o.stdout = to_json(&summary);
                }
                None => {
                    o.stdout = String::from_utf8(csv).expect("CSV is UTF-8");
                    o.info.push(summary.to_string());
                }
            }
        }
    }
    Ok((cfg, o))
}

fn plan_json(command: &str, runs: &[(DumbbellParams, SimConfig)]) -> String {
    let rows: Vec<Value> = runs
        .iter()
        .map(|(p, c)| {
            json!({
                "lambda": p.lambda,
                "steps": c.steps(),
                "replicas": c.replicas,
                "total_steps": c.steps() as f64 * c.replicas as f64,
            })
        })
        .collect();
    let total: f64 = runs.iter().map(|(_, c)| c.steps() as f64 * c.replicas as f64).sum();
    to_json(&json!({
        "command": command,
        "dry_run": true,
        "runs": rows,
        "total_steps": total,
    }))
}

/// Asymptotic column of a sweep without any simulation.
fn quadrature_sweep(
    grid: &[f64],
    f: &Forcing,
    base: &DumbbellParams,
    q: &QuadratureConfig,
) -> SweepResult {
    let n = grid.len();
    let mut out = SweepResult {
        grid: grid.to_vec(),
        mc: vec![None; n],
        asym: Vec::with_capacity(n),
        quad_err: Vec::with_capacity(n),
        z_scores: vec![None; n],
        failures: Vec::with_capacity(n),
    };
    for &lambda in grid {
        match asymptotics::predict_total_drift(f, &base.with_lambda(lambda), q) {
            Ok(pred) => {
                out.asym.push(Some(pred.total_drift));
                out.quad_err.push(Some(pred.quadrature_error_estimate));
                out.failures.push(None);
            }
            Err(e) => {
                out.asym.push(None);
                out.quad_err.push(None);
                out.failures.push(Some(e.to_string()));
            }
        }
    }
    out
}

/// CSV `wave,beta,m,m_error` on an even β grid from 0 to `beta_max`.
fn dump_drift_density(
    f: &Forcing,
    p: &DumbbellParams,
    q: &QuadratureConfig,
    beta_max: Option<f64>,
    points: usize,
) -> Result<Vec<u8>, CliError> {
    let beta_max = match beta_max {
        Some(b) if b > 0.0 && b.is_finite() => b,
        Some(b) => {
            return Err(CliError::Config(format!(
                "--beta-max must be positive and finite (got {b})"
            )))
        }
        None => {
            // ten e-foldings of the slowest dephasing envelope
            let slowest = f
                .waves
                .iter()
                .map(|w| 0.5 * p.dephasing_rate(w.k))
                .filter(|&r| r > 0.0)
                .fold(f64::INFINITY, f64::min);
            if slowest.is_finite() {
                10.0 / slowest
            } else {
                10.0
            }
        }
    };
    if points < 2 {
        return Err(CliError::Config("--beta-points must be at least 2".into()));
    }
    let mut buf = Vec::new();
    writeln!(buf, "wave,beta,m,m_error").expect("writing to memory");
    for (i, w) in f.waves.iter().enumerate() {
        for j in 0..points {
            let beta = beta_max * j as f64 / (points - 1) as f64;
            let m = asymptotics::m_of_beta(beta, w, p, q)?;
            let (beta, m, err) = (format_float(beta), format_float(m.value), format_float(m.error));
            writeln!(buf, "{i},{beta},{m},{err}").expect("writing to memory");
        }
    }
    Ok(buf)
}
