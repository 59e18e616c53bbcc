//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails. Runs the full-size Monte Carlo experiments, so it
//! takes tens of minutes on one core.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use dumbbell_drift::asymptotics::{
    self, drift_order2_single_wave, find_sign_reversal_offset, m_of_beta, predict_total_drift,
    DriftPrediction,
};
use dumbbell_drift::estimator::{self, Summary};
use dumbbell_drift::sde_sim::{simulate_ensemble, simulate_refinement_pair};
use dumbbell_drift::{DumbbellParams, Forcing, QuadratureConfig, SimConfig, WaveParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn unit() -> WaveParams {
    WaveParams::unit()
}

fn unit_params(lambda: f64) -> DumbbellParams {
    DumbbellParams::new(lambda, 1.0)
}

fn q() -> QuadratureConfig {
    QuadratureConfig::default()
}

fn order2(lambda: f64) -> f64 {
    drift_order2_single_wave(&unit(), &unit_params(lambda), &q())
        .expect("quadrature")
        .value
}

fn log_grid(from: f64, to: f64, n: usize) -> Vec<f64> {
    let (a, b) = (from.log10(), to.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

fn limit_convergence() -> Verdict {
    let strong = asymptotics::drift_strong_spring(&unit(), &unit_params(1.0));
    let weak = asymptotics::drift_weak_spring(&unit(), &unit_params(1.0));
    let strong_errs: Vec<f64> = [10.0, 1e2, 1e3].iter().map(|&l| (order2(l) - 0.4).abs()).collect();
    let weak_errs: Vec<f64> = [1e-1, 1e-2, 1e-3].iter().map(|&l| (order2(l) - 0.25).abs()).collect();
    let decreasing = |e: &[f64]| e.windows(2).all(|w| w[1] < w[0]);
    let pass = (strong - 0.4).abs() < 1e-15
        && (weak - 0.25).abs() < 1e-15
        && strong_errs[2] <= 0.01
        && weak_errs[2] <= 0.01
        && decreasing(&strong_errs)
        && decreasing(&weak_errs);
    verdict(
        pass,
        format!(
            "V(1e3) = {:.6}, V(1e-3) = {:.6}; errors to 0.4 {:.2e} {:.2e} {:.2e}, to 0.25 {:.2e} {:.2e} {:.2e}",
            order2(1e3),
            order2(1e-3),
            strong_errs[0],
            strong_errs[1],
            strong_errs[2],
            weak_errs[0],
            weak_errs[1],
            weak_errs[2]
        ),
    )
}

fn cross_engine() -> Verdict {
    let f = Forcing::single(unit(), 0.5);
    let c = SimConfig {
        dt: 1e-3,
        t_final: 1e5,
        replicas: 64,
        seed: 2,
        ..SimConfig::default()
    };
    let grid = [0.1, 1.0, 10.0];
    let sweep = estimator::sweep_lambda(&grid, &f, &unit_params(1.0), &c, &q());
    let mut pass = !sweep.has_failures();
    let mut parts = Vec::new();
    for i in 0..grid.len() {
        let (Some(mc), Some(asym), Some(z)) = (sweep.mc[i], sweep.asym[i], sweep.z_scores[i]) else {
            pass = false;
            parts.push(format!("lambda {}: {:?}", grid[i], sweep.failures[i]));
            continue;
        };
        pass &= z.abs() <= estimator::PASS_Z;
        parts.push(format!(
            "lambda {}: mc {:.5} ± {:.5}, quad {:.5}, z {:+.2}",
            grid[i], mc.mean_drift, mc.std_error, asym, z
        ));
    }
    verdict(pass, parts.join("; "))
}

fn non_monotone() -> Verdict {
    let grid = log_grid(1e-2, 1e2, 41);
    let v: Vec<f64> = grid.iter().map(|&l| order2(l)).collect();
    let slopes: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
    let changes: Vec<usize> = slopes
        .windows(2)
        .enumerate()
        .filter(|(_, s)| s[0] * s[1] < 0.0)
        .map(|(i, _)| i + 1)
        .collect();
    let detail = match changes.first() {
        Some(&i) => format!(
            "slope changes sign at lambda {:.4} (V = {:.6}; ends {:.6}, {:.6})",
            grid[i], v[i], v[0], v[40]
        ),
        None => "no slope sign change".into(),
    };
    verdict(!changes.is_empty(), detail)
}

fn sign_reversal() -> Verdict {
    let eps = 0.5;
    let template = Forcing::single(unit(), eps);
    let grid: Vec<_> = log_grid(1e-2, 1e2, 41).into_iter().map(unit_params).collect();
    let reversal = find_sign_reversal_offset(&grid, &template, &q()).expect("offset search");
    let (Some((lo, hi)), Some(i_dip)) = (reversal.interval, reversal.extremum_index) else {
        return verdict(false, "empty sign-reversal interval");
    };
    let u0 = 0.5 * (lo + hi);
    let f = template.with_offset(u0);
    let predicted = |lambda: f64| predict_total_drift(&f, &unit_params(lambda), &q()).unwrap().total_drift;
    let small = predicted(1e-2);
    let dip_lambda = grid[i_dip].lambda;
    let c = SimConfig {
        dt: 1e-3,
        t_final: 1e5,
        replicas: 64,
        seed: 3,
        ..SimConfig::default()
    };
    let species = [unit_params(dip_lambda), unit_params(10.0)];
    let table = estimator::fanout_experiment(&species, &f, &c, &q()).expect("fanout");
    let rows: Vec<String> = table
        .rows
        .iter()
        .map(|r| {
            format!(
                "lambda {:.4}: mc {:+.5} ± {:.5} ({:.1} SE), predicted {:+.5}",
                r.lambda,
                r.mc.mean_drift,
                r.mc.std_error,
                r.mc.mean_drift.abs() / r.mc.std_error,
                r.asym_drift
            )
        })
        .collect();
    let pass = table.mc_signs_differ && table.sign_split_resolved;
    verdict(
        pass,
        format!(
            "u0 interval ({lo:.5}, {hi:.5}), midpoint {u0:.5}; predicted at lambda 0.01 {small:+.5}; {}",
            rows.join("; ")
        ),
    )
}

/// Per-replica time averages of `g(U)` over recorded samples.
fn replica_averages(
    lambda: f64,
    dt: f64,
    t_final: f64,
    replicas: usize,
    record_every: u64,
    seed: u64,
    g: impl Fn(f64) -> f64,
) -> Summary {
    let c = SimConfig {
        dt,
        t_final,
        replicas,
        record_every,
        seed,
        ..SimConfig::default()
    };
    let trs = simulate_ensemble(&Forcing::none(), &unit_params(lambda), &c).expect("simulate");
    trs.iter()
        .map(|tr| {
            let s = tr.samples.as_ref().expect("recorded");
            s.iter().map(|st| g(st.u())).sum::<f64>() / s.len() as f64
        })
        .collect()
}

fn engine_physics() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();

    // (a) λ·dt = 1e-3 keeps the Euler variance bias (≈ λdt/2) far below the SE.
    for (lambda, seed) in [(0.1f64, 10), (1.0, 11), (10.0, 12)] {
        let dt = 1e-3 / lambda;
        let t_final = 2.2e5 / lambda / 32.0;
        let every = ((0.25 / lambda) / dt).round() as u64;
        let s = replica_averages(lambda, dt, t_final, 32, every, seed, |u| u * u);
        let exact = 1.0 / (2.0 * lambda);
        let z = (s.mean - exact) / s.std_error();
        pass &= z.abs() <= 3.0;
        parts.push(format!("(a) var U at lambda {lambda}: {:.5} vs {exact:.5}, z {z:+.2}", s.mean));
    }

    // (b) centre MSD slope: V is Brownian with E[V(T)²] = σ² T.
    {
        let c = SimConfig {
            dt: 1e-3,
            t_final: 10.0,
            replicas: 4000,
            seed: 13,
            ..SimConfig::default()
        };
        let trs = simulate_ensemble(&Forcing::none(), &unit_params(1.0), &c).unwrap();
        let s: Summary = trs
            .iter()
            .map(|t| t.centre_displacement().powi(2) / t.elapsed())
            .collect();
        let z = (s.mean - 1.0) / s.std_error();
        pass &= z.abs() <= 3.0;
        parts.push(format!("(b) MSD slope {:.4} ± {:.4}, z {z:+.2}", s.mean, s.std_error()));
    }

    // (c) autocovariance E[U(0)U(τ)] = σ²/(2λ) e^{−λτ} from the stationary start.
    {
        let c = SimConfig {
            dt: 1e-3,
            t_final: 2.0,
            replicas: 20_000,
            record_every: 500,
            seed: 14,
            ..SimConfig::default()
        };
        let trs = simulate_ensemble(&Forcing::none(), &unit_params(1.0), &c).unwrap();
        for (lag_index, tau) in [(1usize, 0.5), (2, 1.0), (4, 2.0)] {
            let s: Summary = trs
                .iter()
                .map(|t| {
                    let samples = t.samples.as_ref().unwrap();
                    samples[0].u() * samples[lag_index].u()
                })
                .collect();
            let exact = 0.5 * (-tau as f64).exp();
            let z = (s.mean - exact) / s.std_error();
            pass &= z.abs() <= 3.0;
            parts.push(format!("(c) C({tau}) {:.5} vs {exact:.5}, z {z:+.2}", s.mean));
        }
    }

    // (d) coupled dt → dt/2 on one Brownian path per replica.
    {
        let f = Forcing::single(unit(), 0.5);
        let p = unit_params(1.0);
        let c = SimConfig {
            dt: 1e-3,
            t_final: 2e3,
            seed: 15,
            ..SimConfig::default()
        };
        let pairs: Vec<_> = (0..16)
            .map(|id| simulate_refinement_pair(&f, &p, &c, id).unwrap())
            .collect();
        let coarse: Vec<_> = pairs.iter().map(|(a, _)| a.clone()).collect();
        let fine: Vec<_> = pairs.iter().map(|(_, b)| b.clone()).collect();
        let ec = estimator::estimate_drift(&coarse).unwrap();
        let ef = estimator::estimate_drift(&fine).unwrap();
        let change = (ec.mean_drift - ef.mean_drift).abs();
        let bar = ec.std_error.min(ef.std_error);
        pass &= change < bar;
        parts.push(format!("(d) drift change on halving dt {change:.2e} vs SE {bar:.2e}"));
    }
    verdict(pass, parts.join("; "))
}

fn symmetry() -> Verdict {
    let mut pass = true;
    let mut worst_odd = 0.0f64;
    for lambda in [0.03, 0.3, 1.0, 3.0, 30.0] {
        let p = unit_params(lambda);
        for w in [WaveParams::new(1.0, 1.3, 0.7, 0.0), WaveParams::new(0.5, 2.0, 1.5, 0.0)] {
            let base = drift_order2_single_wave(&w, &p, &q()).unwrap();
            for flipped in [
                WaveParams { k: -w.k, ..w },
                WaveParams { omega: -w.omega, ..w },
            ] {
                let m = drift_order2_single_wave(&flipped, &p, &q()).unwrap();
                let tol = base.error + m.error + 1e-14;
                pass &= (m.value + base.value).abs() <= tol;
                worst_odd = worst_odd.max((m.value + base.value).abs() / tol);
            }
            let flipped_both = WaveParams { k: -w.k, omega: -w.omega, ..w };
            let both = drift_order2_single_wave(&flipped_both, &p, &q()).unwrap();
            pass &= (both.value - base.value).abs() <= base.error + both.error + 1e-14;
            pass &= drift_order2_single_wave(&WaveParams { u: 0.0, ..w }, &p, &q()).unwrap().value == 0.0;
            pass &= drift_order2_single_wave(&WaveParams { omega: 0.0, ..w }, &p, &q()).unwrap().value
                == 0.0;
        }
        let f = Forcing::new(
            vec![unit(), WaveParams::new(0.4, 2.0, 0.5, 1.0), WaveParams::new(0.7, -0.5, 1.2, 0.3)],
            0.13,
            0.6,
        );
        let pred = predict_total_drift(&f, &p, &q()).unwrap();
        pass &= pred.total_drift
            == DriftPrediction::reconstruct(pred.epsilon, pred.offset_order1, &pred.per_wave_order2);
        let zero = predict_total_drift(
            &Forcing::single(WaveParams::new(1.0, 1.0, 0.0, 0.0), 0.6).with_offset(0.13),
            &p,
            &q(),
        )
        .unwrap();
        pass &= zero.total_drift == -0.6 * 0.13;
    }
    verdict(
        pass,
        format!("worst oddness residual {worst_odd:.2} of tolerance; zeros and reconstruction exact"),
    )
}

/// Literal-formula trapezoid: step 1e-4 on [0, 50], plain exp and sinh.
fn trapezoid_m(beta: f64, lambda: f64) -> f64 {
    let (k, omega, sigma, u) = (1.0f64, 1.0f64, 1.0f64, 1.0f64);
    let dephase = 0.5 * k * k * sigma * sigma;
    let z = k * k * sigma * sigma / (2.0 * lambda);
    let h = 1e-4;
    let n = 500_000;
    let g = |alpha: f64| {
        let tau = alpha + beta;
        (-lambda * alpha - dephase * (tau + 1.0 / lambda)).exp()
            * (omega * tau).sin()
            * (z * (-lambda * tau).exp()).sinh()
    };
    // Kahan-compensated sum
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for i in 0..=n {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let y = w * g(i as f64 * h) - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    let inner = h * sum;
    let first = (omega * beta).sin()
        * (-dephase * (beta + (1.0 - (-lambda * beta).exp()) / lambda)).exp();
    0.5 * u * u * k * (first - lambda * inner)
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut worst_at = (0.0, 0.0);
    for _ in 0..20 {
        let beta = rng.random_range(0.05..3.0);
        let lambda = 10f64.powf(rng.random_range(-2.0..2.0));
        let m = m_of_beta(beta, &unit(), &unit_params(lambda), &q()).unwrap().value;
        let oracle = trapezoid_m(beta, lambda);
        let rel = ((m - oracle) / oracle).abs();
        if rel > worst {
            worst = rel;
            worst_at = (beta, lambda);
        }
    }
    verdict(
        worst <= 1e-6,
        format!(
            "worst relative error {worst:.2e} at beta {:.3}, lambda {:.4}",
            worst_at.0, worst_at.1
        ),
    )
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dumbbell-drift"))
}

/// Run the binary; returns (exit code, stdout).
fn run(args: &[&str]) -> (i32, Vec<u8>) {
    let out = bin().args(args).output().expect("spawn binary");
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("config.json");
    std::fs::write(
        &config,
        r#"{"lambda": 1.0, "sigma": 1.0, "epsilon": 0.5, "u0": 0.12,
            "waves": [{"u": 1.0, "k": 1.0, "omega": 1.0}],
            "t_final": 200.0, "replicas": 8, "seed": 5,
            "lambda_grid": [0.3, 3.0], "species": [0.3, 10.0]}"#,
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let path = |name: &str| d.join(name).to_str().unwrap().to_string();
    let mut pass = true;
    let mut parts = Vec::new();
    for (cmd, extra) in [
        ("mc", vec!["--compare-asymptotic"]),
        ("mc", vec!["--replicas", "1", "--t-final", "2000"]),
        ("sweep", vec![]),
        ("fanout", vec![]),
    ] {
        let tag = format!("{cmd}{}", extra.len());
        let first = path(&format!("{tag}.csv"));
        let second = path(&format!("{tag}.rerun.csv"));
        let mut args = vec![cmd, "--config", cfg, "--out", first.as_str()];
        args.extend(extra.iter().copied());
        let (code1, out1) = run(&args);
        let manifest = format!("{first}.manifest.json");
        let (code2, out2) = run(&["rerun", "--manifest", &manifest, "--out", &second]);
        let same_file = std::fs::read(&first).ok() == std::fs::read(&second).ok();
        let samples_same = match std::fs::read(format!("{first}.samples.csv")) {
            Ok(a) => std::fs::read(format!("{second}.samples.csv")).ok() == Some(a),
            Err(_) => true,
        };
        let ok = code1 == code2
            && (code1 == 0 || code1 == 4)
            && out1 == out2
            && same_file
            && samples_same
            && Path::new(&manifest).exists();
        pass &= ok;
        parts.push(format!("{} {}: {}", cmd, extra.join(" "), if ok { "identical" } else { "DIFFERS" }));
    }
    verdict(pass, parts.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("limit-formula convergence", limit_convergence),
        ("cross-engine agreement", cross_engine),
        ("non-monotonicity in lambda", non_monotone),
        ("sign-reversal sorting", sign_reversal),
        ("SDE engine physics", engine_physics),
        ("symmetry suite", symmetry),
        ("oracle equivalence of M(beta)", oracle_equivalence),
        ("manifest reproducibility", reproducibility),
    ];
    // Comma-separated criterion numbers; all criteria run when unset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let v = check();
        let status = if v.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!v.pass);
        println!(
            "{status} criterion {} ({name}) [{:.1}s]: {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
