//! SMC versus the adversarial baseline on the 14-bus case.
//!
//! `cargo run --release --example desk_scale -- [seed] [tau_x] [tau_y] [samples]`

use std::time::Instant;

use scopf_core::cases::CASE14;
use scopf_core::math::sigmoid;
use scopf_core::scopf::{adversarial_opt, smc_scopf, ScopfResult, SmcConfig};
use scopf_core::stresstest::{stress_test, StressOptions};
use scopf_core::{parse_case, PenaltyParams, PriorParams, Scorer, SolverOptions};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn summarize(name: &str, scorer: &Scorer, r: &ScopfResult, samples: usize, seed: u64) {
    let predicted = r.predicted_set();
    let t = Instant::now();
    let s = stress_test(scorer, &r.best_dispatch, Some(&predicted), &StressOptions::new(samples, seed)).unwrap();
    let top = r.top_contingency().unwrap();
    let weakest = top.y.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "{name:>8}: U_x* {:.4} solves {} ({:.1}s) | failure {:.4} coverage {:.4} pred_max {:.3} q50 {:.3} q95 {:.3} | top S_r {:.3} weakest y {:.2} (stress {:.1}s)",
        r.best_mean_severity,
        r.solves,
        r.wall_time,
        s.failure_rate,
        s.coverage_exceedance.unwrap(),
        s.predicted_max_severity.unwrap(),
        s.severity_quantiles.unwrap().p50,
        s.severity_quantiles.unwrap().p95,
        top.risk_adjusted(),
        weakest,
        t.elapsed().as_secs_f64()
    );
    let spread: Vec<f64> = r.contingencies.iter().map(|c| c.report.severity).collect();
    println!("          predicted S: {:?}", spread.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    let line = scorer.network.branch_between(7, 8).unwrap();
    let idx = top.y.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    println!("          weakest line {idx}, sigma(y_7-8) = {:.4}", sigmoid(top.y[line]));
}

fn main() {
    let seed: u64 = arg(1, 0);
    let defaults = SmcConfig::default();
    let config = SmcConfig {
        tau_x: arg(2, defaults.tau_x),
        tau_y: arg(3, defaults.tau_y),
        seed,
        ..defaults
    };
    let samples: usize = arg(4, 10_000);
    let scorer = Scorer::new(parse_case(CASE14).unwrap(), SolverOptions::default(), PenaltyParams::default(), PriorParams::default());
    let smc = smc_scopf(&scorer, &config).unwrap();
    summarize("smc", &scorer, &smc, samples, seed);
    let base = adversarial_opt(&scorer, &config).unwrap();
    summarize("baseline", &scorer, &base, samples, seed);
}
