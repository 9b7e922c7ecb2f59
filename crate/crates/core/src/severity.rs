//! Severity of a dispatch/contingency pair.
//!
//! ```text
//! S   = cost + Σ_g v(P_g) + v(Q_g) + Σ_l v(P_l) + v(Q_l) + Σ_i v(|V_i|)
//!       + L_res · residual   (only when the power flow did not converge)
//! S_r = S + log p₀(y)
//! v(x, lo, hi) = L ([x − hi]₊ + [lo − x]₊)
//! ```

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::math::{relu, LN_2PI};
use crate::netmodel::{dispatch_box, Dispatch, DispatchBox, DispatchError, Network};
use crate::powerflow::{
    grad_scalar, grad_scalar_fd, solve_powerflow, Contingency, Functional, Gradient, GradientError,
    OperatingPoint, PowerFlowError, PowerFlowSolution, Sensitivity, SolverOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Gradient(#[from] GradientError),
    #[error("empty population")]
    EmptyPopulation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyParams {
    /// Hinge penalty coefficient L.
    pub l: f64,
    /// Weight on the mismatch norm of a non-converged solve; defaults to `l`.
    pub l_res: Option<f64>,
    /// Multiplier converting generation cost ($) into severity units.
    pub cost_scale: f64,
    /// Quadratic and linear cost on dispatchable real demand ($/pu², $/pu).
    pub load_cost_p: [f64; 2],
    /// Quadratic and linear cost on dispatchable reactive demand.
    pub load_cost_q: [f64; 2],
}

impl Default for PenaltyParams {
    fn default() -> Self {
        Self {
            l: 100.0,
            l_res: None,
            cost_scale: 1e-4,
            load_cost_p: [0.0; 2],
            load_cost_q: [0.0; 2],
        }
    }
}

impl PenaltyParams {
    pub fn residual_weight(&self) -> f64 {
        self.l_res.unwrap_or(self.l)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.l > 0.0) {
            return Err(format!("penalty.l must be positive, got {}", self.l));
        }
        if let Some(r) = self.l_res {
            if !(r >= 0.0) {
                return Err(format!("penalty.l_res must be non-negative, got {r}"));
            }
        }
        if !(self.cost_scale >= 0.0) {
            return Err("penalty.cost_scale must be non-negative".into());
        }
        Ok(())
    }
}

/// Independent Gaussian prior on each line strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorParams {
    pub mu0: f64,
    pub sigma0: f64,
}

/// Φ⁻¹(0.95): with σ₀ = 1 each line has a 5% chance of y ≤ 0.
pub const FIVE_PERCENT_FAILURE_MEAN: f64 = 1.644_853_626_951_472_2;

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            mu0: FIVE_PERCENT_FAILURE_MEAN,
            sigma0: 1.0,
        }
    }
}

impl PriorParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma0 > 0.0) || !self.mu0.is_finite() {
            return Err(format!("prior needs finite mu0 and sigma0 > 0, got {self:?}"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n_lines: usize) -> Contingency {
        let normal = Normal::new(self.mu0, self.sigma0).expect("validated prior");
        Contingency::new((0..n_lines).map(|_| normal.sample(rng)).collect())
    }

    /// ∇_y log p₀(y).
    pub fn grad_log_prior(&self, contingency: &Contingency) -> Vec<f64> {
        let var = self.sigma0 * self.sigma0;
        contingency.y.iter().map(|y| -(y - self.mu0) / var).collect()
    }
}

/// Σᵢ log N(yᵢ; μ₀, σ₀²).
pub fn log_prior(contingency: &Contingency, prior: &PriorParams) -> f64 {
    let norm = -prior.sigma0.ln() - 0.5 * LN_2PI;
    contingency
        .y
        .iter()
        .map(|y| {
            let t = (y - prior.mu0) / prior.sigma0;
            norm - 0.5 * t * t
        })
        .sum()
}

/// S_r = S + log p₀(y).
pub fn risk_adjusted_severity(severity: f64, log_prior: f64) -> f64 {
    severity + log_prior
}

pub fn hinge_violation(x: f64, lo: f64, hi: f64, l: f64) -> f64 {
    l * (relu(x - hi) + relu(lo - x))
}

/// Derivative of [`hinge_violation`] in `x` (zero on the boundary).
pub fn hinge_slope(x: f64, lo: f64, hi: f64, l: f64) -> f64 {
    if x > hi {
        l
    } else if x < lo {
        -l
    } else {
        0.0
    }
}

/// Real power of every generator: dispatched values for non-slack units and
/// an equal share of the solved slack injection for units at the slack bus.
pub fn generator_output(network: &Network, dispatch: &Dispatch, solution: &PowerFlowSolution) -> Vec<f64> {
    let mut p = vec![0.0; network.generators.len()];
    for (k, &g) in network.dispatched_generators().iter().enumerate() {
        p[g] = dispatch.p_g[k];
    }
    let at_slack = network.generators_at(network.slack());
    for &g in at_slack {
        p[g] = solution.slack_p / at_slack.len() as f64;
    }
    p
}

/// Generation cost in $ (cost curves are in $/pu², $/pu, $).
pub fn economic_cost(network: &Network, dispatch: &Dispatch, solution: &PowerFlowSolution) -> f64 {
    generator_output(network, dispatch, solution)
        .iter()
        .zip(&network.generators)
        .map(|(&p, g)| g.cost.eval(p))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityReport {
    /// Scaled generation (and optional load) cost.
    pub economic_cost: f64,
    /// Positive hinge terms keyed by constraint id; zero terms are omitted.
    pub violations: BTreeMap<String, f64>,
    pub severity: f64,
    pub log_prior: Option<f64>,
    pub risk_adjusted: Option<f64>,
    pub converged: bool,
}

impl SeverityReport {
    pub fn total_violation(&self) -> f64 {
        self.violations.values().sum()
    }
    /// Any positive limit violation or a failed solve.
    pub fn is_failure(&self) -> bool {
        !self.converged || self.violations.iter().any(|(k, &v)| k != RESIDUAL_ID && v > 0.0)
    }
    pub fn with_prior(mut self, log_prior: f64) -> Self {
        self.log_prior = Some(log_prior);
        self.risk_adjusted = Some(risk_adjusted_severity(self.severity, log_prior));
        self
    }
}

pub const RESIDUAL_ID: &str = "residual";

/// Severity as a differentiable functional of the operating point.
pub struct SeverityFunctional<'p> {
    pub penalty: &'p PenaltyParams,
}

impl Functional for SeverityFunctional<'_> {
    fn evaluate(&self, point: &OperatingPoint<'_>) -> (f64, Sensitivity) {
        let (report, sens) = assess(point, self.penalty);
        (report.severity, sens)
    }
}

/// Severity report plus explicit partials for the adjoint.
pub fn assess(point: &OperatingPoint<'_>, penalty: &PenaltyParams) -> (SeverityReport, Sensitivity) {
    let net = point.network;
    let sol = point.solution;
    let d = point.dispatch;
    let shape = net.shape();
    let l = penalty.l;
    let mut sens = Sensitivity::zeros(point);
    let mut violations = BTreeMap::new();
    let mut add = |id: String, v: f64| {
        if v > 0.0 {
            violations.insert(id, v);
        }
    };

    let slack = net.slack();
    let slack_gens = net.generators_at(slack);
    let p_gen = generator_output(net, d, sol);
    let mut cost = 0.0;
    // d(severity)/d(slack_p): slack_p = p_calc[slack] + pd[slack]
    let mut w_slack_p = 0.0;
    let mut pg_slot = vec![None; net.generators.len()];
    for (k, &g) in net.dispatched_generators().iter().enumerate() {
        pg_slot[g] = Some(shape.pg_offset() + k);
    }
    for (g, gen) in net.generators.iter().enumerate() {
        let p = p_gen[g];
        cost += gen.cost.eval(p);
        add(format!("gen{}:p", g + 1), hinge_violation(p, gen.p_min, gen.p_max, l));
        let slope = penalty.cost_scale * gen.cost.slope(p) + hinge_slope(p, gen.p_min, gen.p_max, l);
        match pg_slot[g] {
            Some(k) => sens.dispatch[k] += slope,
            None => w_slack_p += slope / slack_gens.len() as f64,
        }

        let q = sol.q_g[g];
        add(format!("gen{}:q", g + 1), hinge_violation(q, gen.q_min, gen.q_max, l));
        // q_g = (q_calc + qd) / n at the generator's bus
        let share = hinge_slope(q, gen.q_min, gen.q_max, l) / net.generators_at(gen.bus).len() as f64;
        sens.q[gen.bus] += share;
        for (k, &ld) in net.dispatchable_loads().iter().enumerate() {
            if net.loads[ld].bus == gen.bus {
                sens.dispatch[shape.ql_offset() + k] += share;
            }
        }
    }
    sens.p[slack] += w_slack_p;

    let [c2p, c1p] = penalty.load_cost_p;
    let [c2q, c1q] = penalty.load_cost_q;
    for (k, &ld) in net.dispatchable_loads().iter().enumerate() {
        let load = &net.loads[ld];
        let (p, q) = (d.p_l[k], d.q_l[k]);
        let bus_id = net.buses[load.bus].id;
        cost += c2p * p * p + c1p * p + c2q * q * q + c1q * q;
        add(format!("load{}@bus{}:p", k + 1, bus_id), hinge_violation(p, load.p_min, load.p_max, l));
        add(format!("load{}@bus{}:q", k + 1, bus_id), hinge_violation(q, load.q_min, load.q_max, l));
        sens.dispatch[shape.pl_offset() + k] +=
            penalty.cost_scale * (2.0 * c2p * p + c1p) + hinge_slope(p, load.p_min, load.p_max, l);
        sens.dispatch[shape.ql_offset() + k] +=
            penalty.cost_scale * (2.0 * c2q * q + c1q) + hinge_slope(q, load.q_min, load.q_max, l);
        if load.bus == slack {
            sens.dispatch[shape.pl_offset() + k] += w_slack_p;
        }
    }

    for (i, bus) in net.buses.iter().enumerate() {
        let v = sol.v[i];
        add(format!("bus{}:vm", bus.id), hinge_violation(v, bus.v_min, bus.v_max, l));
        sens.vm[i] += hinge_slope(v, bus.v_min, bus.v_max, l);
    }

    if !sol.converged {
        let w = penalty.residual_weight();
        add(RESIDUAL_ID.to_string(), w * sol.residual_norm);
        if let Some((k, f)) = sol
            .mismatch
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
        {
            sens.mismatch[k] += w * f.signum();
        }
    }

    let economic_cost = penalty.cost_scale * cost;
    let severity = economic_cost + violations.values().sum::<f64>();
    (
        SeverityReport {
            economic_cost,
            violations,
            severity,
            log_prior: None,
            risk_adjusted: None,
            converged: sol.converged,
        },
        sens,
    )
}

/// Severity report without the prior fields.
pub fn severity(
    network: &Network,
    dispatch: &Dispatch,
    contingency: &Contingency,
    solution: &PowerFlowSolution,
    penalty: &PenaltyParams,
) -> SeverityReport {
    assess(&OperatingPoint::new(network, dispatch, contingency, solution), penalty).0
}

/// Value of a population potential and, when requested, its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Potential {
    pub value: f64,
    pub grad: Option<Vec<f64>>,
}

/// Bundles a network with the solver, penalty and prior settings and counts
/// every power-flow solve it performs.
#[derive(Debug)]
pub struct Scorer {
    pub network: Network,
    pub dbox: DispatchBox,
    pub solver: SolverOptions,
    pub penalty: PenaltyParams,
    pub prior: PriorParams,
    solves: AtomicU64,
}

impl Clone for Scorer {
    fn clone(&self) -> Self {
        Self::new(self.network.clone(), self.solver.clone(), self.penalty.clone(), self.prior.clone())
    }
}

impl Scorer {
    pub fn new(network: Network, solver: SolverOptions, penalty: PenaltyParams, prior: PriorParams) -> Self {
        let dbox = dispatch_box(&network);
        Self {
            network,
            dbox,
            solver,
            penalty,
            prior,
            solves: AtomicU64::new(0),
        }
    }

    /// Power-flow solves performed so far.
    pub fn solves(&self) -> u64 {
        self.solves.load(Ordering::Relaxed)
    }
    pub fn reset_solves(&self) {
        self.solves.store(0, Ordering::Relaxed);
    }

    pub fn solve(&self, dispatch: &Dispatch, contingency: &Contingency) -> Result<PowerFlowSolution, PowerFlowError> {
        self.solves.fetch_add(1, Ordering::Relaxed);
        solve_powerflow(&self.network, dispatch, contingency, &self.solver)
    }

    /// Full report (with prior terms) for one pair.
    pub fn score(&self, dispatch: &Dispatch, contingency: &Contingency) -> Result<SeverityReport, ScoreError> {
        let sol = self.solve(dispatch, contingency)?;
        Ok(severity(&self.network, dispatch, contingency, &sol, &self.penalty)
            .with_prior(log_prior(contingency, &self.prior)))
    }

    fn gradient_at(
        &self,
        dispatch: &Dispatch,
        contingency: &Contingency,
        solution: &PowerFlowSolution,
    ) -> Result<Gradient, ScoreError> {
        let f = SeverityFunctional { penalty: &self.penalty };
        match grad_scalar(&self.network, &self.dbox, dispatch, contingency, solution, &f, &self.solver) {
            Ok(g) => Ok(g),
            Err(GradientError::Singular) => {
                log::debug!("adjoint singular; using finite differences");
                let z = self.dbox.to_unconstrained(dispatch)?;
                let n = 2 * (z.len() + contingency.len()) as u64 + 1;
                self.solves.fetch_add(n, Ordering::Relaxed);
                Ok(grad_scalar_fd(&self.network, &self.dbox, &z, contingency, &f, &self.solver, 1e-6)?)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Severity report and gradient of S with respect to the unconstrained
    /// dispatch and the line strengths.
    pub fn score_with_gradient(
        &self,
        dispatch: &Dispatch,
        contingency: &Contingency,
    ) -> Result<(SeverityReport, Gradient), ScoreError> {
        let sol = self.solve(dispatch, contingency)?;
        let report = severity(&self.network, dispatch, contingency, &sol, &self.penalty)
            .with_prior(log_prior(contingency, &self.prior));
        let grad = self.gradient_at(dispatch, contingency, &sol)?;
        Ok((report, grad))
    }

    /// U_x(z) = mean over the contingency population of S(x(z), y).
    pub fn dispatch_potential(
        &self,
        contingencies: &[Contingency],
        z: &[f64],
        with_grad: bool,
    ) -> Result<Potential, ScoreError> {
        if contingencies.is_empty() {
            return Err(ScoreError::EmptyPopulation);
        }
        let d = self.dbox.from_unconstrained(z)?;
        let n = contingencies.len() as f64;
        if with_grad {
            let members = exec::try_map_indexed(contingencies.len(), |j| {
                let sol = self.solve(&d, &contingencies[j])?;
                let s = severity(&self.network, &d, &contingencies[j], &sol, &self.penalty).severity;
                let g = self.gradient_at(&d, &contingencies[j], &sol)?;
                Ok::<_, ScoreError>((s, g.z))
            })?;
            let mut value = 0.0;
            let mut grad = vec![0.0; z.len()];
            for (s, g) in &members {
                value += s;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            grad.iter_mut().for_each(|g| *g /= n);
            Ok(Potential { value: value / n, grad: Some(grad) })
        } else {
            let values = exec::try_map_indexed(contingencies.len(), |j| {
                let sol = self.solve(&d, &contingencies[j])?;
                Ok::<_, ScoreError>(severity(&self.network, &d, &contingencies[j], &sol, &self.penalty).severity)
            })?;
            Ok(Potential { value: values.iter().sum::<f64>() / n, grad: None })
        }
    }

    /// U_y(y) = −min over the dispatch population of S_r(x, y). The gradient
    /// is taken through the minimising dispatch (lowest index on ties).
    pub fn contingency_potential(
        &self,
        dispatches: &[Dispatch],
        contingency: &Contingency,
        with_grad: bool,
    ) -> Result<Potential, ScoreError> {
        if dispatches.is_empty() {
            return Err(ScoreError::EmptyPopulation);
        }
        let solved = exec::try_map_indexed(dispatches.len(), |i| {
            let sol = self.solve(&dispatches[i], contingency)?;
            let s = severity(&self.network, &dispatches[i], contingency, &sol, &self.penalty).severity;
            Ok::<_, ScoreError>((s, sol))
        })?;
        let (best, (s_min, sol)) = solved
            .iter()
            .enumerate()
            .fold(None::<(usize, &(f64, PowerFlowSolution))>, |acc, (i, m)| match acc {
                Some((_, b)) if b.0 <= m.0 => acc,
                _ => Some((i, m)),
            })
            .expect("non-empty");
        let lp = log_prior(contingency, &self.prior);
        let value = -risk_adjusted_severity(*s_min, lp);
        let grad = if with_grad {
            let g = self.gradient_at(&dispatches[best], contingency, sol)?;
            let gp = self.prior.grad_log_prior(contingency);
            Some(g.contingency.iter().zip(gp).map(|(a, b)| -(a + b)).collect())
        } else {
            None
        };
        Ok(Potential { value, grad })
    }

    /// S_r(x, y) and its gradient in y.
    pub fn risk_adjusted(&self, dispatch: &Dispatch, contingency: &Contingency) -> Result<(f64, Vec<f64>), ScoreError> {
        let (report, g) = self.score_with_gradient(dispatch, contingency)?;
        let gp = self.prior.grad_log_prior(contingency);
        let grad = g.contingency.iter().zip(gp).map(|(a, b)| a + b).collect();
        Ok((report.risk_adjusted.expect("prior attached"), grad))
    }
}
