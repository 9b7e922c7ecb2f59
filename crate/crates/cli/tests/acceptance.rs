//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the summary is always printed. The
//! process exits non-zero if a criterion outside [`KNOWN_RED`] fails, or if a
//! known-red criterion starts passing (so the list gets updated). With
//! `SCOPF_ACCEPTANCE_STRICT=1` every failure is fatal.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use scopf_cli::report::read_manifest;
use scopf_core::cases::CASE14;
use scopf_core::math::sigmoid;
use scopf_core::rng;
use scopf_core::sampler::{log_acceptance, mala_chain, ChainState, FnDensity, LogDensity, MalaConfig};
use scopf_core::scopf::{adversarial_opt, smc_scopf, ScopfResult, SmcConfig};
use scopf_core::severity::{economic_cost, severity};
use scopf_core::stresstest::{stress_test, StressOptions, StressReport};
use scopf_core::{parse_case, solve_powerflow, Contingency, PenaltyParams, PriorParams, Scorer, SolverOptions};

/// Criteria that fail on the pinned seeds with the pinned configuration.
/// They still print FAIL; see the README for the analysis.
const KNOWN_RED: &[u8] = &[5];

const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const STRESS_SAMPLES: usize = 10_000;
/// Branch 7-8: the only line into the generator at case bus 8.
const BUS8_LINE: usize = 13;

struct Verdict {
    id: u8,
    name: &'static str,
    pass: bool,
    secs: f64,
    detail: String,
}

fn timed(id: u8, name: &'static str, budget_s: Option<f64>, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let t = Instant::now();
    let (mut pass, mut detail) = f();
    let secs = t.elapsed().as_secs_f64();
    if let Some(b) = budget_s {
        if secs >= b {
            pass = false;
            detail.push_str(&format!("; over the {b} s budget"));
        }
    }
    Verdict { id, name, pass, secs, detail }
}

fn batch_mean(xs: &[f64], batches: usize) -> (f64, f64) {
    let len = xs.len() / batches;
    let means: Vec<f64> = xs.chunks_exact(len).map(|c| c.iter().sum::<f64>() / len as f64).collect();
    let b = means.len() as f64;
    let m = means.iter().sum::<f64>() / b;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1.0);
    (m, (var / b).sqrt())
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h)).sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn quartic_u(x: f64) -> f64 {
    x.powi(4) - 0.5 * x.powi(3) - x * x
}

fn criterion_1() -> (bool, String) {
    let target = FnDensity(|x: &[f64]| {
        let v = x[0];
        (-quartic_u(v), vec![-(4.0 * v.powi(3) - 1.5 * v * v - 2.0 * v)])
    });
    let out = mala_chain(vec![-2.0], &target, &MalaConfig::new(0.05, 20_000, 0)).unwrap();
    let best = out.trace.iter().max_by(|a, b| a.log_density.total_cmp(&b.log_density)).unwrap().state[0];
    let p = |x: f64| (-quartic_u(x)).exp();
    let mass = simpson(p, 0.2, 3.0, 20_000) / simpson(p, -3.0, 3.0, 20_000);
    let ind: Vec<f64> = out.trace.iter().map(|t| f64::from(t.state[0] > 0.2)).collect();
    let (frac, se) = batch_mean(&ind, 20);
    let mode_ok = (best - 0.919).abs() < 0.05;
    let occ_ok = (frac - mass).abs() < 3.0 * se;
    (
        mode_ok && occ_ok,
        format!("best state {best:.4} (target 0.919 ± 0.05); right-well occupancy {frac:.4} ± {se:.4} vs quadrature {mass:.4}"),
    )
}

fn criterion_2() -> (bool, String) {
    let normal = FnDensity(|x: &[f64]| (-0.5 * x[0] * x[0], vec![-x[0]]));
    let out = mala_chain(vec![0.0], &normal, &MalaConfig::new(0.5, 50_000, 0)).unwrap();
    let xs: Vec<f64> = out.trace.iter().map(|t| t.state[0]).collect();
    let (mean, se_m) = batch_mean(&xs, 50);
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    let (var, se_v) = batch_mean(&sq, 50);
    let moments_ok = mean.abs() < 3.0 * se_m && (var - 1.0).abs() < 3.0 * se_v;

    let tau = 0.1;
    let (a, b) = (0.3, -0.7);
    let pi = |x: f64| (-0.5 * x * x).exp();
    let q = |from: f64, to: f64| {
        let m = from - tau * from;
        (-(to - m).powi(2) / (4.0 * tau)).exp() / (4.0 * std::f64::consts::PI * tau).sqrt()
    };
    let state = |x: f64, t: &dyn LogDensity| ChainState::new(vec![x], t).unwrap();
    let alpha = |from: f64, to: f64, t: &dyn LogDensity| log_acceptance(&state(from, t), &state(to, t), tau).exp().min(1.0);
    let lhs = pi(a) * q(a, b) * alpha(a, b, &normal);
    let rhs = pi(b) * q(b, a) * alpha(b, a, &normal);
    let balance = (lhs - rhs).abs();

    // Dyadic states so log p is exact after the 1e6 shift.
    let shifted = FnDensity(|x: &[f64]| (1e6 - 0.5 * x[0] * x[0], vec![-x[0]]));
    let shift = (alpha(0.5, -0.75, &normal) - alpha(0.5, -0.75, &shifted)).abs();
    (
        moments_ok && balance <= 1e-12 && shift <= 1e-12,
        format!(
            "mean {mean:.4} ± {se_m:.4}, variance {var:.4} ± {se_v:.4}, acceptance {:.3}; detailed balance gap {balance:.1e}; shift gap {shift:.1e}",
            out.stats.acceptance_rate()
        ),
    )
}

const REF_VM: [f64; 14] = [
    1.06, 1.0450000000000002, 1.0100000000000002, 1.0294892711599917, 1.034882707535241, 1.0699999999999998,
    1.0558758052903017, 1.09, 1.0496724015809098, 1.0458220270822898, 1.0542951640670033, 1.0546925776268181,
    1.0494853564995736, 1.0315436287748871,
];
const REF_VA: [f64; 14] = [
    0.0, -0.0864249515902441, -0.22018638011991357, -0.1818660619465355, -0.1563082825535666,
    -0.25607269420306267, -0.2365512788293801, -0.23655127882938018, -0.26475560191291264, -0.2681831872346515,
    -0.2643397732282752, -0.27080617484855796, -0.2718424099544777, -0.2854152725398688,
];

fn criterion_3() -> (bool, String) {
    let net = parse_case(CASE14).unwrap();
    let d = net.nominal_dispatch();
    let sol = solve_powerflow(&net, &d, &Contingency::intact(20), &SolverOptions::default()).unwrap();
    let dv = sol.v.iter().zip(REF_VM).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let da = sol.theta.iter().zip(REF_VA).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let pass = sol.converged && sol.residual_norm <= 1e-8 && sol.iterations <= 6 && dv < 1e-6 && da < 1e-6;
    (
        pass,
        format!(
            "{} iterations, residual {:.1e}, max |ΔV| {dv:.1e}, max |Δθ| {da:.1e}, cost {:.4}",
            sol.iterations,
            sol.residual_norm,
            economic_cost(&net, &d, &sol)
        ),
    )
}

fn criterion_4() -> (bool, String) {
    let solver = SolverOptions {
        tol: 1e-13,
        max_iter: 40,
        ..Default::default()
    };
    let s = Scorer::new(parse_case(CASE14).unwrap(), solver, PenaltyParams::default(), PriorParams::default());
    let sev = |z: &[f64], y: &[f64]| {
        let d = s.dbox.from_unconstrained(z).unwrap();
        let c = Contingency::new(y.to_vec());
        let sol = solve_powerflow(&s.network, &d, &c, &s.solver).unwrap();
        severity(&s.network, &d, &c, &sol, &s.penalty).severity
    };
    let rich = |f: &dyn Fn(f64) -> f64| {
        let h = 1e-3;
        let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
        (4.0 * d(h / 2.0) - d(h)) / 3.0
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..20u64 {
        let (z, y) = (0..)
            .find_map(|attempt| {
                let mut r = rng::stream(&[seed, 0xfd, attempt]);
                let d = s.dbox.sample_uniform(&mut r);
                let c = s.prior.sample(&mut r, 20);
                let ok = solve_powerflow(&s.network, &d, &c, &s.solver).unwrap().converged;
                ok.then(|| (s.dbox.to_unconstrained(&d).unwrap(), c.y))
            })
            .unwrap();
        let d = s.dbox.from_unconstrained(&z).unwrap();
        let (_, g) = s.score_with_gradient(&d, &Contingency::new(y.clone())).unwrap();
        let mut fd = Vec::new();
        for i in 0..z.len() {
            fd.push(rich(&|t| {
                let mut zz = z.clone();
                zz[i] += t;
                sev(&zz, &y)
            }));
        }
        for i in 0..y.len() {
            fd.push(rich(&|t| {
                let mut yy = y.clone();
                yy[i] += t;
                sev(&z, &yy)
            }));
        }
        for (a, b) in g.z.iter().chain(&g.contingency).zip(&fd) {
            if b.abs() > 1e-6 {
                worst = worst.max((a - b).abs() / b.abs());
                checked += 1;
            }
        }
    }
    (worst <= 1e-4, format!("worst relative error {worst:.2e} over {checked} components, 20 seeds"))
}

struct DeskRun {
    seed: u64,
    smc: ScopfResult,
    base: ScopfResult,
    smc_stress: StressReport,
    base_stress: StressReport,
}

fn desk_runs() -> Vec<DeskRun> {
    let scorer = Scorer::new(
        parse_case(CASE14).unwrap(),
        SolverOptions::default(),
        PenaltyParams::default(),
        PriorParams::default(),
    );
    DESK_SEEDS
        .iter()
        .map(|&seed| {
            let cfg = SmcConfig { seed, ..SmcConfig::default() };
            let smc = smc_scopf(&scorer, &cfg).unwrap();
            let base = adversarial_opt(&scorer, &cfg).unwrap();
            let opts = StressOptions::new(STRESS_SAMPLES, seed);
            let smc_stress = stress_test(&scorer, &smc.best_dispatch, Some(&smc.predicted_set()), &opts).unwrap();
            let base_stress = stress_test(&scorer, &base.best_dispatch, Some(&base.predicted_set()), &opts).unwrap();
            DeskRun {
                seed,
                smc,
                base,
                smc_stress,
                base_stress,
            }
        })
        .collect()
}

fn criterion_5(runs: &[DeskRun]) -> (bool, String) {
    let cov = |r: &StressReport| r.coverage_exceedance.unwrap();
    let a = runs.iter().all(|r| cov(&r.base_stress) > 0.01);
    let b1 = runs.iter().all(|r| cov(&r.smc_stress) < cov(&r.base_stress));
    let b2 = runs.iter().filter(|r| cov(&r.smc_stress) < 0.005).count() >= 2;
    let c = runs.iter().all(|r| r.smc_stress.failure_rate < r.base_stress.failure_rate);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: coverage smc {:.4} / base {:.4}, failure smc {:.4} / base {:.4}",
                r.seed,
                cov(&r.smc_stress),
                cov(&r.base_stress),
                r.smc_stress.failure_rate,
                r.base_stress.failure_rate
            )
        })
        .collect();
    (
        a && b1 && b2 && c,
        format!("(a) {a} (b) {} (c) {c}; {}", b1 && b2, per_seed.join("; ")),
    )
}

fn criterion_6(runs: &[DeskRun]) -> (bool, String) {
    let mut worst: f64 = 0.0;
    let mut counts = Vec::new();
    for r in runs {
        let (a, b) = (r.smc.solves as f64, r.base.solves as f64);
        worst = worst.max((a - b).abs() / a.max(b));
        counts.push(format!("{}/{}", r.smc.solves, r.base.solves));
    }
    (worst <= 0.01, format!("solves smc/base {}; worst gap {:.2}%", counts.join(", "), 100.0 * worst))
}

fn criterion_7(runs: &[DeskRun]) -> (bool, String) {
    let mut hits = 0;
    let mut detail = Vec::new();
    for r in runs {
        let top = r.smc.top_contingency().unwrap();
        let strength = sigmoid(top.y[BUS8_LINE]);
        hits += usize::from(strength < 0.1);
        let cut: Vec<String> = top
            .y
            .iter()
            .enumerate()
            .filter(|(_, &y)| sigmoid(y) < 0.1)
            .map(|(i, _)| i.to_string())
            .collect();
        detail.push(format!("seed {}: σ(y_7-8) {strength:.3}, lines below 0.1: [{}]", r.seed, cut.join(" ")));
    }
    (hits >= 2, format!("{hits}/3 hits; {}", detail.join("; ")))
}

fn scopf(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_scopf"))
        .args(args)
        .env("RUST_LOG", "error")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn criterion_8() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk14.toml")).unwrap();
    let cfg_text = cfg_text.replace("[attack]", "[attack]\ndispatch = \"runs/solve/result.json\"");
    let cfg = root.join("desk14.toml");
    fs::write(&cfg, cfg_text).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = |name: &str, pass: usize| root.join(format!("pass{pass}")).join(name);

    let mut mismatched = Vec::new();
    let mut manifests = [Vec::new(), Vec::new()];
    for pass in 0..2 {
        // The config reads the dispatch from runs/solve, so each pass
        // writes its solve there first.
        let solve = root.join("runs/solve");
        let _ = fs::remove_dir_all(&solve);
        let steps: [(&str, Vec<String>); 5] = [
            ("solve", vec!["solve".into(), "--config".into(), cfg.into(), "--out".into(), solve.display().to_string()]),
            ("baseline", vec!["baseline".into(), "--config".into(), cfg.into(), "--out".into(), out("baseline", pass).display().to_string()]),
            ("attack", vec!["attack".into(), "--config".into(), cfg.into(), "--out".into(), out("attack", pass).display().to_string()]),
            ("stress", vec!["stress".into(), "--config".into(), cfg.into(), "--out".into(), out("stress", pass).display().to_string()]),
            (
                "compare",
                vec![
                    "compare".into(),
                    out("stress", pass).join("stress.json").display().to_string(),
                    out("stress", pass).join("stress.json").display().to_string(),
                    "--out".into(),
                    out("compare", pass).display().to_string(),
                ],
            ),
        ];
        for (name, args) in &steps {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            if !scopf(&args) {
                return (false, format!("`{name}` failed on pass {pass}"));
            }
            let dir = if *name == "solve" { solve.clone() } else { out(name, pass) };
            manifests[pass].push((*name, read_manifest(&dir).unwrap()));
        }
        if pass == 0 {
            fs::rename(&solve, out("solve", 0)).unwrap();
        }
    }
    let mut files = 0;
    for ((name, a), (_, b)) in manifests[0].iter().zip(&manifests[1]) {
        files += a.files.len();
        if a != b {
            mismatched.push(*name);
        }
    }
    (
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("5 commands, {files} files hash-identical across reruns")
        } else {
            format!("differing outputs: {}", mismatched.join(", "))
        },
    )
}

fn main() {
    let mut verdicts = vec![
        timed(1, "quartic sampling demo", Some(5.0), criterion_1),
        timed(2, "MALA correctness", Some(10.0), criterion_2),
        timed(3, "power-flow fidelity", Some(1.0), criterion_3),
        timed(4, "gradient fidelity", Some(30.0), criterion_4),
    ];
    let t = Instant::now();
    let runs = desk_runs();
    let desk_secs = t.elapsed().as_secs_f64();
    let mut v5 = timed(5, "overconfidence reproduction", None, || criterion_5(&runs));
    v5.secs += desk_secs;
    if v5.secs >= 900.0 {
        v5.pass = false;
        v5.detail.push_str("; over the 900 s budget");
    }
    verdicts.push(v5);
    verdicts.push(timed(6, "budget parity", None, || criterion_6(&runs)));
    verdicts.push(timed(7, "worst-case structure", None, || criterion_7(&runs)));
    verdicts.push(timed(8, "determinism", None, criterion_8));

    println!();
    for v in &verdicts {
        let known = !v.pass && KNOWN_RED.contains(&v.id);
        println!(
            "{} criterion {} ({}) [{:.2} s]{}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.secs,
            if known { " [known failure]" } else { "" },
            v.detail
        );
    }
    let failed: Vec<u8> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    let unexpected: Vec<u8> = failed.iter().copied().filter(|id| !KNOWN_RED.contains(id)).collect();
    let fixed: Vec<u8> = KNOWN_RED.iter().copied().filter(|id| !failed.contains(id)).collect();
    println!("\nacceptance: {} passed, {} failed", verdicts.len() - failed.len(), failed.len());
    if !fixed.is_empty() {
        println!("known-red criteria now passing: {fixed:?}; update KNOWN_RED");
    }
    let strict = std::env::var("SCOPF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if !unexpected.is_empty() || !fixed.is_empty() || (strict && !failed.is_empty()) {
        std::process::exit(1);
    }
}
