//! Attack/defend drivers.
//!
//! [`smc_scopf`] alternates MALA over a dispatch population (target
//! `e^{−U_x}`, `U_x` = mean severity over the contingency population) and a
//! contingency population (target `e^{−U_y}`, `U_y` = −min over the dispatch
//! population of S_r). [`adversarial_opt`] is the gradient baseline with the
//! same population structure and solve budget. Both drivers are written
//! against the [`Game`] trait so they can be exercised without a power flow.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::netmodel::{Dispatch, DispatchError};
use crate::powerflow::Contingency;
use crate::rng::{self, domain};
use crate::sampler::{run_population, BoxError, ChainStats, DensityValue, LogDensity, MalaConfig, SamplerError};
use crate::severity::{Potential, ScoreError, Scorer, SeverityReport};

#[derive(Debug, Error)]
pub enum ScopfError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Sampler(SamplerError),
}

impl From<SamplerError> for ScopfError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Target(inner) => match inner.downcast::<ScoreError>() {
                Ok(score) => ScopfError::Score(*score),
                Err(other) => ScopfError::Sampler(SamplerError::Target(other)),
            },
            other => ScopfError::Sampler(other),
        }
    }
}

impl From<DispatchError> for ScopfError {
    fn from(e: DispatchError) -> Self {
        ScopfError::Score(e.into())
    }
}

/// Two-player game in unconstrained coordinates: `z` for the dispatcher,
/// `y` for the attacker.
pub trait Game: Sync {
    fn sample_dispatch(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn sample_contingency(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// U_x(z) = mean over `ys` of S(z, y).
    fn dispatch_potential(&self, ys: &[Vec<f64>], z: &[f64], with_grad: bool) -> Result<Potential, ScoreError>;
    /// U_y(y) = −min over `zs` of S_r(z, y).
    fn contingency_potential(&self, zs: &[Vec<f64>], y: &[f64], with_grad: bool) -> Result<Potential, ScoreError>;
    /// S_r(z, y) and its gradient in y.
    fn risk_adjusted(&self, z: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>), ScoreError>;
    /// Severity evaluations performed so far.
    fn evaluations(&self) -> u64;
}

/// [`Game`] over a power network.
pub struct GridGame<'a> {
    pub scorer: &'a Scorer,
}

impl GridGame<'_> {
    fn contingencies(ys: &[Vec<f64>]) -> Vec<Contingency> {
        ys.iter().map(|y| Contingency::new(y.clone())).collect()
    }
}

impl Game for GridGame<'_> {
    fn sample_dispatch(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let dbox = &self.scorer.dbox;
        let d = dbox.sample_uniform(rng);
        dbox.to_unconstrained(&d).expect("uniform samples lie strictly inside the box")
    }

    fn sample_contingency(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.scorer.prior.sample(rng, self.scorer.network.n_branches()).y
    }

    fn dispatch_potential(&self, ys: &[Vec<f64>], z: &[f64], with_grad: bool) -> Result<Potential, ScoreError> {
        self.scorer.dispatch_potential(&Self::contingencies(ys), z, with_grad)
    }

    fn contingency_potential(&self, zs: &[Vec<f64>], y: &[f64], with_grad: bool) -> Result<Potential, ScoreError> {
        let ds = zs
            .iter()
            .map(|z| self.scorer.dbox.from_unconstrained(z))
            .collect::<Result<Vec<_>, _>>()?;
        self.scorer.contingency_potential(&ds, &Contingency::new(y.to_vec()), with_grad)
    }

    fn risk_adjusted(&self, z: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>), ScoreError> {
        let d = self.scorer.dbox.from_unconstrained(z)?;
        self.scorer.risk_adjusted(&d, &Contingency::new(y.to_vec()))
    }

    fn evaluations(&self) -> u64 {
        self.scorer.solves()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcConfig {
    pub n_x: usize,
    pub n_y: usize,
    /// Alternating rounds N.
    pub rounds: usize,
    /// MALA substeps K per round (gradient steps for the baseline).
    pub substeps: usize,
    pub tau_x: f64,
    pub tau_y: f64,
    pub seed: u64,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            n_x: 10,
            n_y: 10,
            rounds: 10,
            substeps: 30,
            tau_x: 3e-3,
            tau_y: 0.3,
            seed: 0,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<(), ScopfError> {
        if self.n_x == 0 || self.n_y == 0 {
            return Err(ScopfError::Config("population sizes must be at least 1".into()));
        }
        for (name, tau) in [("tau_x", self.tau_x), ("tau_y", self.tau_y)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(ScopfError::Config(format!("{name} must be positive, got {tau}")));
            }
        }
        Ok(())
    }
}

/// Severity evaluations implied by a config. Both drivers spend exactly
/// this many unless an adjoint solve falls back to finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    /// Evaluations per alternating round: `2 n_x n_y (K + 1)`, or 0 when K = 0.
    pub per_round: u64,
    pub rounds: u64,
    /// Final argmin of U_x over the dispatch population: `n_x n_y`.
    pub selection: u64,
    /// Reports of the final contingencies against x*: `n_y`.
    pub reports: u64,
    pub total: u64,
}

pub fn equal_budget(config: &SmcConfig) -> BudgetLedger {
    let (nx, ny, k) = (config.n_x as u64, config.n_y as u64, config.substeps as u64);
    let per_round = if k == 0 { 0 } else { 2 * nx * ny * (k + 1) };
    let rounds = config.rounds as u64;
    let selection = nx * ny;
    let reports = ny;
    BudgetLedger {
        per_round,
        rounds,
        selection,
        reports,
        total: per_round * rounds + selection + reports,
    }
}

/// Per-round summary. Fields are `None` for rounds that took no steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub mean_ux: Option<f64>,
    pub min_ux: Option<f64>,
    pub max_sr: Option<f64>,
    pub accept_rate_x: Option<f64>,
    pub accept_rate_y: Option<f64>,
}

/// Driver output in game coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub best_index: usize,
    pub best_z: Vec<f64>,
    /// U_x of the best dispatch against the final contingency set.
    pub best_ux: f64,
    pub dispatches: Vec<Vec<f64>>,
    pub contingencies: Vec<Vec<f64>>,
    pub history: Vec<RoundSummary>,
    pub evaluations: u64,
}

struct DispatchTarget<'a, G: Game + ?Sized> {
    game: &'a G,
    ys: &'a [Vec<f64>],
}

impl<G: Game + ?Sized> LogDensity for DispatchTarget<'_, G> {
    fn evaluate(&self, z: &[f64]) -> Result<DensityValue, BoxError> {
        let u = self.game.dispatch_potential(self.ys, z, true)?;
        Ok(DensityValue {
            log_p: -u.value,
            grad: u.grad.expect("requested").into_iter().map(|g| -g).collect(),
        })
    }
}

struct ContingencyTarget<'a, G: Game + ?Sized> {
    game: &'a G,
    zs: &'a [Vec<f64>],
}

impl<G: Game + ?Sized> LogDensity for ContingencyTarget<'_, G> {
    fn evaluate(&self, y: &[f64]) -> Result<DensityValue, BoxError> {
        let u = self.game.contingency_potential(self.zs, y, true)?;
        Ok(DensityValue {
            log_p: -u.value,
            grad: u.grad.expect("requested").into_iter().map(|g| -g).collect(),
        })
    }
}

fn initial_populations<G: Game + ?Sized>(game: &G, config: &SmcConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let zs = (0..config.n_x)
        .map(|i| game.sample_dispatch(&mut rng::stream(&[config.seed, domain::INIT_DISPATCH, i as u64])))
        .collect();
    let ys = (0..config.n_y)
        .map(|j| game.sample_contingency(&mut rng::stream(&[config.seed, domain::INIT_CONTINGENCY, j as u64])))
        .collect();
    (zs, ys)
}

/// Index of the smallest value; lowest index on ties.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

fn select_best<G: Game + ?Sized>(
    game: &G,
    zs: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
    history: Vec<RoundSummary>,
) -> Result<Outcome, ScopfError> {
    let ux = zs
        .iter()
        .map(|z| game.dispatch_potential(&ys, z, false).map(|p| p.value))
        .collect::<Result<Vec<_>, _>>()?;
    let best = argmin(&ux);
    Ok(Outcome {
        best_index: best,
        best_z: zs[best].clone(),
        best_ux: ux[best],
        dispatches: zs,
        contingencies: ys,
        history,
        evaluations: game.evaluations(),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmax(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn fmin(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn idle_round(round: usize) -> RoundSummary {
    RoundSummary {
        round,
        mean_ux: None,
        min_ux: None,
        max_sr: None,
        accept_rate_x: None,
        accept_rate_y: None,
    }
}

fn pooled(stats: impl Iterator<Item = ChainStats>) -> f64 {
    stats.fold(ChainStats::default(), |a, s| a.merge(&s)).acceptance_rate()
}

/// Population attack/defend loop over an arbitrary game.
pub fn smc<G: Game + ?Sized>(game: &G, config: &SmcConfig) -> Result<Outcome, ScopfError> {
    config.validate()?;
    let (mut zs, mut ys) = initial_populations(game, config);
    let mut history = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        if config.substeps == 0 {
            history.push(idle_round(round));
            continue;
        }
        let mala = |tau: f64, phase: u64| MalaConfig {
            step_size: tau,
            steps: config.substeps,
            seed: config.seed,
            stream: 2 * round as u64 + phase,
        };

        let out_x = run_population(zs, &DispatchTarget { game, ys: &ys }, &mala(config.tau_x, 0))?;
        let ux: Vec<f64> = out_x.iter().map(|o| -o.final_density.as_ref().expect("K > 0").log_p).collect();
        let rate_x = pooled(out_x.iter().map(|o| o.stats));
        zs = out_x.into_iter().map(|o| o.final_state).collect();

        let out_y = run_population(ys, &ContingencyTarget { game, zs: &zs }, &mala(config.tau_y, 1))?;
        let sr: Vec<f64> = out_y.iter().map(|o| o.final_density.as_ref().expect("K > 0").log_p).collect();
        let rate_y = pooled(out_y.iter().map(|o| o.stats));
        ys = out_y.into_iter().map(|o| o.final_state).collect();

        log::debug!("smc round {round}: mean U_x {:.4}, max S_r {:.4}, accept {rate_x:.2}/{rate_y:.2}", mean(&ux), fmax(&sr));
        history.push(RoundSummary {
            round,
            mean_ux: Some(mean(&ux)),
            min_ux: Some(fmin(&ux)),
            max_sr: Some(fmax(&sr)),
            accept_rate_x: Some(rate_x),
            accept_rate_y: Some(rate_y),
        });
    }
    select_best(game, zs, ys, history)
}

/// Alternating gradient baseline over an arbitrary game. Each dispatch takes
/// K descent steps on U_x (K + 1 evaluations); each contingency then takes
/// ascent steps on S_r against the round's best dispatch, with
/// `n_x (K + 1)` evaluations so the budget matches [`smc`].
pub fn adversarial<G: Game + ?Sized>(game: &G, config: &SmcConfig) -> Result<Outcome, ScopfError> {
    config.validate()?;
    let (mut zs, mut ys) = initial_populations(game, config);
    let k = config.substeps;
    let mut history = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        if k == 0 {
            history.push(idle_round(round));
            continue;
        }
        let descended = exec::try_map_indexed(zs.len(), |i| {
            let mut z = zs[i].clone();
            for step in 0..=k {
                let u = game.dispatch_potential(&ys, &z, true)?;
                if step == k {
                    return Ok::<_, ScoreError>((z, u.value));
                }
                for (zi, gi) in z.iter_mut().zip(u.grad.expect("requested")) {
                    *zi -= config.tau_x * gi;
                }
            }
            unreachable!()
        })?;
        let ux: Vec<f64> = descended.iter().map(|(_, u)| *u).collect();
        zs = descended.into_iter().map(|(z, _)| z).collect();
        let best = zs[argmin(&ux)].clone();

        let evals = config.n_x * (k + 1);
        let ascended = exec::try_map_indexed(ys.len(), |j| {
            let mut y = ys[j].clone();
            for step in 0..evals {
                let (sr, g) = game.risk_adjusted(&best, &y)?;
                if step + 1 == evals {
                    return Ok::<_, ScoreError>((y, sr));
                }
                for (yi, gi) in y.iter_mut().zip(g) {
                    *yi += config.tau_y * gi;
                }
            }
            unreachable!()
        })?;
        let sr: Vec<f64> = ascended.iter().map(|(_, s)| *s).collect();
        ys = ascended.into_iter().map(|(y, _)| y).collect();

        log::debug!("baseline round {round}: mean U_x {:.4}, max S_r {:.4}", mean(&ux), fmax(&sr));
        history.push(RoundSummary {
            round,
            mean_ux: Some(mean(&ux)),
            min_ux: Some(fmin(&ux)),
            max_sr: Some(fmax(&sr)),
            accept_rate_x: None,
            accept_rate_y: None,
        });
    }
    select_best(game, zs, ys, history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedContingency {
    pub y: Vec<f64>,
    pub report: SeverityReport,
}

impl PredictedContingency {
    pub fn risk_adjusted(&self) -> f64 {
        self.report.risk_adjusted.expect("prior attached")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScopfResult {
    pub best_dispatch: Dispatch,
    pub best_index: usize,
    /// Mean severity of x* over the final contingency set.
    pub best_mean_severity: f64,
    /// Final contingency population, in population order, scored against x*.
    pub contingencies: Vec<PredictedContingency>,
    pub history: Vec<RoundSummary>,
    /// Instrumented power-flow solves.
    pub solves: u64,
    pub ledger: BudgetLedger,
    #[serde(skip)]
    pub wall_time: f64,
}

impl ScopfResult {
    /// Contingency with the highest risk-adjusted severity against x*.
    pub fn top_contingency(&self) -> Option<&PredictedContingency> {
        self.contingencies
            .iter()
            .reduce(|a, b| if b.risk_adjusted() > a.risk_adjusted() { b } else { a })
    }

    pub fn predicted_set(&self) -> Vec<Contingency> {
        self.contingencies.iter().map(|c| Contingency::new(c.y.clone())).collect()
    }
}

fn finish(scorer: &Scorer, outcome: Outcome, config: &SmcConfig, started: Instant) -> Result<ScopfResult, ScopfError> {
    let best_dispatch = scorer.dbox.from_unconstrained(&outcome.best_z)?;
    let contingencies = exec::try_map_indexed(outcome.contingencies.len(), |j| {
        let y = &outcome.contingencies[j];
        scorer
            .score(&best_dispatch, &Contingency::new(y.clone()))
            .map(|report| PredictedContingency { y: y.clone(), report })
    })?;
    let ledger = equal_budget(config);
    let solves = scorer.solves();
    if solves != ledger.total {
        log::warn!("solve count {solves} differs from ledger {}", ledger.total);
    }
    Ok(ScopfResult {
        best_dispatch,
        best_index: outcome.best_index,
        best_mean_severity: outcome.best_ux,
        contingencies,
        history: outcome.history,
        solves,
        ledger,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// SMC prediction and mitigation on a power network. The scorer's solve
/// counter is reset at the start.
pub fn smc_scopf(scorer: &Scorer, config: &SmcConfig) -> Result<ScopfResult, ScopfError> {
    let started = Instant::now();
    scorer.reset_solves();
    let outcome = smc(&GridGame { scorer }, config)?;
    finish(scorer, outcome, config, started)
}

/// Adversarial-optimization baseline on a power network.
pub fn adversarial_opt(scorer: &Scorer, config: &SmcConfig) -> Result<ScopfResult, ScopfError> {
    let started = Instant::now();
    scorer.reset_solves();
    let outcome = adversarial(&GridGame { scorer }, config)?;
    finish(scorer, outcome, config, started)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Sorted by descending risk-adjusted severity.
    pub contingencies: Vec<PredictedContingency>,
    pub stats: ChainStats,
}

/// Sample `n_y` contingencies from p(y|x) ∝ p₀(y) e^{S(x, y)} for a fixed
/// dispatch.
pub fn predict_contingencies(
    scorer: &Scorer,
    dispatch: &Dispatch,
    n_y: usize,
    steps: usize,
    tau: f64,
    seed: u64,
) -> Result<Prediction, ScopfError> {
    if n_y == 0 {
        return Err(ScopfError::Config("n_y must be at least 1".into()));
    }
    let n_lines = scorer.network.n_branches();
    let init: Vec<Vec<f64>> = (0..n_y)
        .map(|j| scorer.prior.sample(&mut rng::stream(&[seed, domain::ATTACK, j as u64]), n_lines).y)
        .collect();
    let target = AttackTarget { scorer, dispatch };
    let config = MalaConfig {
        step_size: tau,
        steps,
        seed,
        stream: domain::ATTACK,
    };
    let out = run_population(init, &target, &config)?;
    let stats = out.iter().fold(ChainStats::default(), |a, o| a.merge(&o.stats));
    let mut contingencies = exec::try_map_indexed(out.len(), |j| {
        let y = out[j].final_state.clone();
        scorer
            .score(dispatch, &Contingency::new(y.clone()))
            .map(|report| PredictedContingency { y, report })
    })?;
    contingencies.sort_by(|a, b| b.risk_adjusted().total_cmp(&a.risk_adjusted()));
    Ok(Prediction { contingencies, stats })
}

struct AttackTarget<'a> {
    scorer: &'a Scorer,
    dispatch: &'a Dispatch,
}

impl LogDensity for AttackTarget<'_> {
    fn evaluate(&self, y: &[f64]) -> Result<DensityValue, BoxError> {
        let (log_p, grad) = self.scorer.risk_adjusted(self.dispatch, &Contingency::new(y.to_vec()))?;
        Ok(DensityValue { log_p, grad })
    }
}

#[cfg(test)]
pub(crate) mod toy {
    use super::*;
    use rand::Rng;
    use std::sync::atomic::{AtomicU64, Ordering};

    /// S(z, y) = ½‖z − a‖² + β z·y − ½‖y − b‖², flat prior.
    pub struct Quadratic {
        pub a: Vec<f64>,
        pub b: Vec<f64>,
        pub beta: f64,
        pub evals: AtomicU64,
    }

    impl Quadratic {
        pub fn new(a: Vec<f64>, b: Vec<f64>, beta: f64) -> Self {
            Self {
                a,
                b,
                beta,
                evals: AtomicU64::new(0),
            }
        }

        pub fn s(&self, z: &[f64], y: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
            self.evals.fetch_add(1, Ordering::Relaxed);
            let mut v = 0.0;
            let mut gz = vec![0.0; z.len()];
            let mut gy = vec![0.0; y.len()];
            for i in 0..z.len() {
                v += 0.5 * (z[i] - self.a[i]).powi(2) + self.beta * z[i] * y[i] - 0.5 * (y[i] - self.b[i]).powi(2);
                gz[i] = z[i] - self.a[i] + self.beta * y[i];
                gy[i] = self.beta * z[i] - (y[i] - self.b[i]);
            }
            (v, gz, gy)
        }

        /// Saddle point of the game.
        pub fn saddle(&self) -> Vec<f64> {
            let bb = self.beta * self.beta;
            self.a.iter().zip(&self.b).map(|(a, b)| (a - self.beta * b) / (1.0 + bb)).collect()
        }
    }

    impl Game for Quadratic {
        fn sample_dispatch(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
            (0..self.a.len()).map(|_| rng.random_range(-3.0..3.0)).collect()
        }
        fn sample_contingency(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
            (0..self.b.len()).map(|_| rng.random_range(-3.0..3.0)).collect()
        }
        fn dispatch_potential(&self, ys: &[Vec<f64>], z: &[f64], with_grad: bool) -> Result<Potential, ScoreError> {
            let n = ys.len() as f64;
            let mut value = 0.0;
            let mut grad = vec![0.0; z.len()];
            for y in ys {
                let (v, gz, _) = self.s(z, y);
                value += v / n;
                grad.iter_mut().zip(gz).for_each(|(a, g)| *a += g / n);
            }
            Ok(Potential {
                value,
                grad: with_grad.then_some(grad),
            })
        }
        fn contingency_potential(&self, zs: &[Vec<f64>], y: &[f64], with_grad: bool) -> Result<Potential, ScoreError> {
            let evals: Vec<_> = zs.iter().map(|z| self.s(z, y)).collect();
            let best = argmin(&evals.iter().map(|e| e.0).collect::<Vec<_>>());
            Ok(Potential {
                value: -evals[best].0,
                grad: with_grad.then(|| evals[best].2.iter().map(|g| -g).collect()),
            })
        }
        fn risk_adjusted(&self, z: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>), ScoreError> {
            let (v, _, gy) = self.s(z, y);
            Ok((v, gy))
        }
        fn evaluations(&self) -> u64 {
            self.evals.load(Ordering::Relaxed)
        }
    }
}
