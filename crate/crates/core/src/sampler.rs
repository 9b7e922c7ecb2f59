//! Metropolis-adjusted Langevin algorithm.
//!
//! Proposal: `x' = x + τ ∇log p(x) + η`, `η ~ N(0, 2τ I)`, accepted with
//! probability `min(1, P_accept)` where
//!
//! ```text
//! log P_accept = log p(x') − ‖x − x' − τ∇log p(x')‖² / 4τ
//!              − log p(x)  + ‖x' − x − τ∇log p(x)‖² / 4τ
//! ```
//!
//! Everything is computed in log space. The noise of step `k` of chain `c`
//! comes from the counter-based stream `(seed, stream, c, k)`.

use std::error::Error as StdError;
use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::rng::{self, domain};

pub type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("target evaluation failed: {0}")]
    Target(BoxError),
    #[error("log density or gradient is not finite at the initial state")]
    NonFiniteStart,
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("empty population")]
    EmptyPopulation,
}

/// Unnormalised log density together with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityValue {
    pub log_p: f64,
    pub grad: Vec<f64>,
}

impl DensityValue {
    pub fn is_finite(&self) -> bool {
        self.log_p.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// Target density. Implementations must be safe to evaluate from several
/// threads at once.
pub trait LogDensity: Sync {
    fn evaluate(&self, x: &[f64]) -> Result<DensityValue, BoxError>;
}

/// Adapts a closure returning `(log p, ∇log p)`.
pub struct FnDensity<F>(pub F);

impl<F> LogDensity for FnDensity<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    fn evaluate(&self, x: &[f64]) -> Result<DensityValue, BoxError> {
        let (log_p, grad) = (self.0)(x);
        Ok(DensityValue { log_p, grad })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MalaConfig {
    /// Step size τ.
    pub step_size: f64,
    /// Number of steps K.
    pub steps: usize,
    pub seed: u64,
    /// Extra stream key so one seed can drive several independent runs.
    #[serde(default)]
    pub stream: u64,
}

impl MalaConfig {
    pub fn new(step_size: f64, steps: usize, seed: u64) -> Self {
        Self {
            step_size,
            steps,
            seed,
            stream: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(SamplerError::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStats {
    pub accepted: usize,
    pub proposed: usize,
}

impl ChainStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn merge(&self, other: &ChainStats) -> ChainStats {
        ChainStats {
            accepted: self.accepted + other.accepted,
            proposed: self.proposed + other.proposed,
        }
    }
}

/// Position of a chain with its cached density evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub density: DensityValue,
}

impl ChainState {
    pub fn new<T: LogDensity + ?Sized>(x: Vec<f64>, target: &T) -> Result<Self, SamplerError> {
        let density = target.evaluate(&x).map_err(SamplerError::Target)?;
        if !density.is_finite() {
            return Err(SamplerError::NonFiniteStart);
        }
        Ok(Self { x, density })
    }
}

/// Deterministic part of the proposal plus the supplied noise.
pub fn mala_proposal(current: &ChainState, tau: f64, noise: &[f64]) -> Vec<f64> {
    current
        .x
        .iter()
        .zip(&current.density.grad)
        .zip(noise)
        .map(|((x, g), n)| x + tau * g + n)
        .collect()
}

/// log of the Langevin proposal density q(from → to) up to a constant.
fn log_transition(from: &[f64], from_grad: &[f64], to: &[f64], tau: f64) -> f64 {
    let sq: f64 = to
        .iter()
        .zip(from)
        .zip(from_grad)
        .map(|((t, f), g)| {
            let r = t - f - tau * g;
            r * r
        })
        .sum();
    -sq / (4.0 * tau)
}

/// log P_accept for moving from `current` to `proposal`.
pub fn log_acceptance(current: &ChainState, proposal: &ChainState, tau: f64) -> f64 {
    let forward = log_transition(&current.x, &current.density.grad, &proposal.x, tau);
    let backward = log_transition(&proposal.x, &proposal.density.grad, &current.x, tau);
    (proposal.density.log_p - current.density.log_p) + (backward - forward)
}

/// One MALA step. Returns the next state and whether the proposal was
/// accepted. A proposal whose density or gradient is not finite is
/// rejected.
pub fn mala_step<T, R>(current: &ChainState, target: &T, tau: f64, rng: &mut R) -> Result<(ChainState, bool), SamplerError>
where
    T: LogDensity + ?Sized,
    R: Rng + ?Sized,
{
    let scale = (2.0 * tau).sqrt();
    let noise: Vec<f64> = (0..current.x.len())
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let u: f64 = rng.sample(rand::distr::Open01);
    let x_new = mala_proposal(current, tau, &noise);
    let density = target.evaluate(&x_new).map_err(SamplerError::Target)?;
    if !density.is_finite() || x_new.iter().any(|v| !v.is_finite()) {
        return Ok((current.clone(), false));
    }
    let proposal = ChainState { x: x_new, density };
    let log_a = log_acceptance(current, &proposal, tau);
    if log_a >= 0.0 || u.ln() < log_a {
        Ok((proposal, true))
    } else {
        Ok((current.clone(), false))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub accepted: bool,
    pub log_density: f64,
    pub state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutput {
    pub final_state: Vec<f64>,
    /// Density at the final state; `None` when no step was taken.
    pub final_density: Option<DensityValue>,
    pub trace: Vec<TracePoint>,
    pub stats: ChainStats,
}

fn run_chain<T: LogDensity + ?Sized>(
    x0: Vec<f64>,
    target: &T,
    config: &MalaConfig,
    chain: usize,
    record: bool,
) -> Result<ChainOutput, SamplerError> {
    config.validate()?;
    if config.steps == 0 {
        return Ok(ChainOutput {
            final_state: x0,
            final_density: None,
            trace: Vec::new(),
            stats: ChainStats::default(),
        });
    }
    let mut state = ChainState::new(x0, target)?;
    let mut stats = ChainStats::default();
    let mut trace = Vec::with_capacity(if record { config.steps } else { 0 });
    for step in 0..config.steps {
        let mut rng = rng::stream(&[config.seed, domain::MALA, config.stream, chain as u64, step as u64]);
        let (next, accepted) = mala_step(&state, target, config.step_size, &mut rng)?;
        stats.proposed += 1;
        stats.accepted += accepted as usize;
        state = next;
        if record {
            trace.push(TracePoint {
                step,
                accepted,
                log_density: state.density.log_p,
                state: state.x.clone(),
            });
        }
    }
    Ok(ChainOutput {
        final_state: state.x,
        final_density: Some(state.density),
        trace,
        stats,
    })
}

/// K sequential MALA steps from `x0`, keeping the full trace.
pub fn mala_chain<T: LogDensity + ?Sized>(x0: Vec<f64>, target: &T, config: &MalaConfig) -> Result<ChainOutput, SamplerError> {
    run_chain(x0, target, config, 0, true)
}

/// Evolve each member of `states` as an independent chain. Chain `i` draws
/// from stream `i`, so results do not depend on scheduling.
pub fn run_population<T: LogDensity + ?Sized>(
    states: Vec<Vec<f64>>,
    target: &T,
    config: &MalaConfig,
) -> Result<Vec<ChainOutput>, SamplerError> {
    population(states, target, config, false)
}

/// [`run_population`] keeping every chain's trace.
pub fn run_population_traced<T: LogDensity + ?Sized>(
    states: Vec<Vec<f64>>,
    target: &T,
    config: &MalaConfig,
) -> Result<Vec<ChainOutput>, SamplerError> {
    population(states, target, config, true)
}

fn population<T: LogDensity + ?Sized>(
    states: Vec<Vec<f64>>,
    target: &T,
    config: &MalaConfig,
    record: bool,
) -> Result<Vec<ChainOutput>, SamplerError> {
    if states.is_empty() {
        return Err(SamplerError::EmptyPopulation);
    }
    let slots: Vec<std::sync::Mutex<Option<Vec<f64>>>> = states.into_iter().map(|s| std::sync::Mutex::new(Some(s))).collect();
    exec::try_map_indexed(slots.len(), |i| {
        let x0 = slots[i].lock().expect("unpoisoned").take().expect("taken once");
        run_chain(x0, target, config, i, record)
    })
}

/// CSV dump: `chain,step,accepted,log_density,x0,x1,...`.
pub fn write_trace_csv<W: Write>(mut out: W, chains: &[ChainOutput]) -> io::Result<()> {
    let dim = chains
        .iter()
        .flat_map(|c| c.trace.first())
        .map(|t| t.state.len())
        .next()
        .unwrap_or(0);
    write!(out, "chain,step,accepted,log_density")?;
    for k in 0..dim {
        write!(out, ",x{k}")?;
    }
    writeln!(out)?;
    for (c, chain) in chains.iter().enumerate() {
        for t in &chain.trace {
            write!(out, "{c},{},{},{}", t.step, t.accepted as u8, t.log_density)?;
            for v in &t.state {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal() -> FnDensity<impl Fn(&[f64]) -> (f64, Vec<f64>) + Sync> {
        FnDensity(|x: &[f64]| (-0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.iter().map(|v| -v).collect()))
    }

    #[test]
    fn flat_gradient_and_zero_noise_is_accepted() {
        let flat = FnDensity(|x: &[f64]| (0.0, vec![0.0; x.len()]));
        let s = ChainState::new(vec![0.4, -1.0], &flat).unwrap();
        let x = mala_proposal(&s, 0.1, &[0.0, 0.0]);
        assert_eq!(x, s.x);
        let p = ChainState::new(x, &flat).unwrap();
        assert_eq!(log_acceptance(&s, &p, 0.1), 0.0);
    }

    #[test]
    fn constant_density_reduces_to_noise_ratio() {
        // With ∇log p = 0 the two transition terms are ‖η‖² and ‖−η‖², so the
        // ratio is exactly one.
        let flat = FnDensity(|x: &[f64]| (3.0, vec![0.0; x.len()]));
        let s = ChainState::new(vec![0.0, 1.0], &flat).unwrap();
        let eta = [0.3, -0.2];
        let p = ChainState::new(mala_proposal(&s, 0.2, &eta), &flat).unwrap();
        let n2: f64 = eta.iter().map(|e| e * e).sum();
        let direct = -(n2 - n2) / (4.0 * 0.2);
        assert_eq!(log_acceptance(&s, &p, 0.2), direct);
    }

    #[test]
    fn detailed_balance_on_standard_normal() {
        let target = std_normal();
        let tau = 0.1;
        let a = ChainState::new(vec![0.3], &target).unwrap();
        let b = ChainState::new(vec![-0.7], &target).unwrap();
        // Oracle: full Gaussian transition densities and unnormalised π.
        let pi = |x: f64| (-0.5 * x * x).exp();
        let q = |from: f64, to: f64| {
            let m = from + tau * (-from);
            (-(to - m) * (to - m) / (4.0 * tau)).exp() / (4.0 * std::f64::consts::PI * tau).sqrt()
        };
        let alpha_ab = log_acceptance(&a, &b, tau).exp().min(1.0);
        let alpha_ba = log_acceptance(&b, &a, tau).exp().min(1.0);
        let lhs = pi(0.3) * q(0.3, -0.7) * alpha_ab;
        let rhs = pi(-0.7) * q(-0.7, 0.3) * alpha_ba;
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    fn shifted_acceptance(a: f64, b: f64, shift: f64) -> (f64, f64) {
        let shifted = FnDensity(move |x: &[f64]| (shift - 0.5 * x[0] * x[0], vec![-x[0]]));
        let target = std_normal();
        let p = |t: &dyn LogDensity| {
            let sa = ChainState::new(vec![a], t).unwrap();
            let sb = ChainState::new(vec![b], t).unwrap();
            log_acceptance(&sa, &sb, 0.1).exp().min(1.0)
        };
        (p(&target), p(&shifted))
    }

    #[test]
    fn acceptance_ignores_constant_shift() {
        // Dyadic states keep log p exact after a 1e6 shift.
        let (base, moved) = shifted_acceptance(0.5, -0.75, 1e6);
        assert!(base < 1.0);
        assert!((base - moved).abs() < 1e-12, "{base} vs {moved}");
        let (base, moved) = shifted_acceptance(0.3, -0.7, 1e3);
        assert!((base - moved).abs() < 1e-12, "{base} vs {moved}");
    }

    #[test]
    fn zero_steps_returns_start() {
        let out = mala_chain(vec![1.5], &std_normal(), &MalaConfig::new(0.1, 0, 1)).unwrap();
        assert_eq!(out.final_state, vec![1.5]);
        assert!(out.trace.is_empty());
        assert_eq!(out.stats.proposed, 0);
    }

    #[test]
    fn non_finite_proposals_are_rejected() {
        // Density blows up away from the origin.
        let t = FnDensity(|x: &[f64]| if x[0].abs() < 1e-3 { (0.0, vec![0.0]) } else { (f64::NAN, vec![0.0]) });
        let out = mala_chain(vec![0.0], &t, &MalaConfig::new(0.5, 20, 3)).unwrap();
        assert_eq!(out.stats.proposed, 20);
        assert_eq!(out.stats.accepted, 0);
        assert_eq!(out.final_state, vec![0.0]);
    }

    #[test]
    fn population_of_one_matches_chain() {
        let cfg = MalaConfig::new(0.3, 50, 11);
        let chain = mala_chain(vec![2.0, -1.0], &std_normal(), &cfg).unwrap();
        let pop = run_population(vec![vec![2.0, -1.0]], &std_normal(), &cfg).unwrap();
        assert_eq!(pop[0].final_state, chain.final_state);
        assert_eq!(pop[0].stats, chain.stats);
    }

    #[test]
    fn population_is_reproducible_and_streams_differ() {
        let cfg = MalaConfig::new(0.3, 40, 5);
        let start = vec![vec![0.0, 0.0]; 4];
        let a = run_population(start.clone(), &std_normal(), &cfg).unwrap();
        let b = run_population(start.clone(), &std_normal(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].final_state, a[1].final_state);
        let seq = exec::sequential(|| run_population(start, &std_normal(), &cfg).unwrap());
        assert_eq!(a, seq);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let out = mala_chain(vec![0.0, 0.0], &std_normal(), &MalaConfig::new(0.3, 3, 1)).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[out]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "chain,step,accepted,log_density,x0,x1");
        assert_eq!(lines.len(), 4);
    }
}
