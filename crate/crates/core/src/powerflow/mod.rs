//! AC power flow under a contingency.
//!
//! The solve is done in two steps: Newton–Raphson on the polar mismatch
//! equations for the unknown angles and PQ-bus magnitudes, then recovery of
//! generator reactive output and slack-bus injections from the solved state.

mod adjoint;
mod injections;
mod linalg;
mod ybus;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::sigmoid;
use crate::netmodel::{BusKind, Dispatch, Network};

pub use adjoint::{grad_scalar, grad_scalar_fd, Functional, Gradient, GradientError, OperatingPoint, Sensitivity};
pub use injections::{bus_injections, InjectionDerivatives};
pub use ybus::assemble_ybus;

/// Line strengths large enough that σ(y) rounds to exactly 1.
pub const INTACT_STRENGTH: f64 = 40.0;

/// Real-valued strength per branch; branch admittance is σ(yᵢ)·Y_nom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    pub y: Vec<f64>,
}

impl Contingency {
    pub fn new(y: Vec<f64>) -> Self {
        Self { y }
    }

    /// Every line at nominal admittance.
    pub fn intact(n_branches: usize) -> Self {
        Self {
            y: vec![INTACT_STRENGTH; n_branches],
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }
    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Admittance scale σ(yᵢ) of each branch.
    pub fn scales(&self) -> Vec<f64> {
        self.y.iter().map(|&y| sigmoid(y)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Mismatch ∞-norm tolerance (p.u.).
    pub tol: f64,
    pub max_iter: usize,
    /// Tikhonov weight used when the Jacobian cannot be factorised directly.
    pub jacobian_regularization: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 20,
            jacobian_regularization: 1e-8,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tol > 0.0) {
            return Err(format!("solver.tol must be positive, got {}", self.tol));
        }
        if self.max_iter < 1 {
            return Err("solver.max_iter must be at least 1".into());
        }
        if !(self.jacobian_regularization >= 0.0) {
            return Err("solver.jacobian_regularization must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("Jacobian is singular even with regularisation (iteration {iteration})")]
    SingularJacobian { iteration: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerFlowSolution {
    /// Voltage magnitude at every bus.
    pub v: Vec<f64>,
    /// Voltage angle at every bus; the slack angle is exactly zero.
    pub theta: Vec<f64>,
    /// Reactive output of each generator.
    pub q_g: Vec<f64>,
    pub slack_p: f64,
    pub slack_q: f64,
    /// Net injections computed from the returned state.
    pub p_calc: Vec<f64>,
    pub q_calc: Vec<f64>,
    /// Mismatch vector in [`StateLayout`] row order.
    pub mismatch: Vec<f64>,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Ordering of Newton unknowns and mismatch rows: angles of non-slack buses
/// followed by magnitudes of PQ buses, in bus order. Row `k` is the
/// equation paired with unknown `k`.
#[derive(Clone, Debug)]
pub struct StateLayout {
    pub angle_buses: Vec<usize>,
    pub magnitude_buses: Vec<usize>,
    /// Row of each bus' P equation.
    pub p_row: Vec<Option<usize>>,
    /// Row of each bus' Q equation.
    pub q_row: Vec<Option<usize>>,
}

impl StateLayout {
    pub fn new(network: &Network) -> Self {
        let n = network.n_buses();
        let angle_buses: Vec<usize> = (0..n).filter(|&i| network.buses[i].kind != BusKind::Slack).collect();
        let magnitude_buses: Vec<usize> = (0..n).filter(|&i| network.buses[i].kind == BusKind::Pq).collect();
        let mut p_row = vec![None; n];
        let mut q_row = vec![None; n];
        for (k, &i) in angle_buses.iter().enumerate() {
            p_row[i] = Some(k);
        }
        for (k, &i) in magnitude_buses.iter().enumerate() {
            q_row[i] = Some(angle_buses.len() + k);
        }
        Self {
            angle_buses,
            magnitude_buses,
            p_row,
            q_row,
        }
    }

    pub fn dim(&self) -> usize {
        self.angle_buses.len() + self.magnitude_buses.len()
    }
}

/// Scheduled net injections (generation minus demand) for every bus. Slack
/// generation is left out since it is an output of the solve.
pub(crate) fn scheduled_injections(network: &Network, dispatch: &Dispatch) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (pd, qd) = network.bus_demand(dispatch);
    let mut p_spec: Vec<f64> = pd.iter().map(|p| -p).collect();
    let q_spec: Vec<f64> = qd.iter().map(|q| -q).collect();
    for (k, &g) in network.dispatched_generators().iter().enumerate() {
        p_spec[network.generators[g].bus] += dispatch.p_g[k];
    }
    (p_spec, q_spec, pd, qd)
}

fn check_inputs(network: &Network, dispatch: &Dispatch, contingency: &Contingency) -> Result<(), PowerFlowError> {
    if contingency.len() != network.n_branches() {
        return Err(PowerFlowError::Input(format!(
            "contingency has {} entries for {} branches",
            contingency.len(),
            network.n_branches()
        )));
    }
    if dispatch.shape() != network.shape() {
        return Err(PowerFlowError::Input(format!(
            "dispatch shape {:?} does not match network {:?}",
            dispatch.shape(),
            network.shape()
        )));
    }
    if contingency.y.iter().any(|y| !y.is_finite()) {
        return Err(PowerFlowError::Input("non-finite line strength".into()));
    }
    Ok(())
}

fn mismatch(layout: &StateLayout, p: &[f64], q: &[f64], p_spec: &[f64], q_spec: &[f64]) -> Vec<f64> {
    layout
        .angle_buses
        .iter()
        .map(|&i| p[i] - p_spec[i])
        .chain(layout.magnitude_buses.iter().map(|&i| q[i] - q_spec[i]))
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Solve the AC power-flow equations from a flat start.
///
/// Always returns a solution when the inputs are valid. If Newton does not
/// reach `tol` within `max_iter` iterations (or diverges to non-finite
/// values), the iterate with the smallest mismatch is returned with
/// `converged = false`.
pub fn solve_powerflow(
    network: &Network,
    dispatch: &Dispatch,
    contingency: &Contingency,
    options: &SolverOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    check_inputs(network, dispatch, contingency)?;
    let ybus = assemble_ybus(network, contingency);
    let layout = StateLayout::new(network);
    let (p_spec, q_spec, pd, qd) = scheduled_injections(network, dispatch);

    let setpoints = network.voltage_setpoints(dispatch);
    let mut vm: Vec<f64> = setpoints.iter().map(|v| v.unwrap_or(1.0)).collect();
    let mut va = vec![0.0; network.n_buses()];

    let mut best: Option<(f64, Vec<f64>, Vec<f64>, usize)> = None;
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let (p, q) = bus_injections(&ybus, &vm, &va);
        let f = mismatch(&layout, &p, &q, &p_spec, &q_spec);
        let norm = inf_norm(&f);
        if !norm.is_finite() {
            break;
        }
        if best.as_ref().is_none_or(|b| norm < b.0) {
            best = Some((norm, vm.clone(), va.clone(), iterations));
        }
        if norm <= options.tol {
            converged = true;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }
        let d = InjectionDerivatives::new(&ybus, &vm, &va, &p, &q);
        let jac = d.jacobian(&layout);
        let rhs: Vec<f64> = f.iter().map(|x| -x).collect();
        // A singular Jacobian at the flat start is structural; later on it
        // means the iterates have diverged, which is ordinary non-convergence.
        let Some(step) = linalg::solve(&jac, &rhs, options.jacobian_regularization) else {
            if iterations == 0 {
                return Err(PowerFlowError::SingularJacobian { iteration: 0 });
            }
            break;
        };
        for (k, &i) in layout.angle_buses.iter().enumerate() {
            va[i] += step[k];
        }
        let off = layout.angle_buses.len();
        for (k, &i) in layout.magnitude_buses.iter().enumerate() {
            vm[i] += step[off + k];
        }
        iterations += 1;
    }

    let (_, vm, va, _) = best.expect("flat start has finite mismatch for finite inputs");
    let (p, q) = bus_injections(&ybus, &vm, &va);
    let f = mismatch(&layout, &p, &q, &p_spec, &q_spec);
    let residual_norm = inf_norm(&f);

    let slack = network.slack();
    let mut q_g = vec![0.0; network.generators.len()];
    for &b in network.generator_buses() {
        let at = network.generators_at(b);
        let share = (q[b] + qd[b]) / at.len() as f64;
        for &g in at {
            q_g[g] = share;
        }
    }
    Ok(PowerFlowSolution {
        slack_p: p[slack] + pd[slack],
        slack_q: q[slack] + qd[slack],
        v: vm,
        theta: va,
        q_g,
        p_calc: p,
        q_calc: q,
        mismatch: f,
        residual_norm,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::CASE14;
    use crate::netmodel::{parse_case, Bus, Generator, CostCurve, Branch};
    use num_complex::Complex64;

    pub(crate) fn tiny_network(load_p: f64) -> Network {
        let bus = |id, kind| Bus {
            id,
            kind,
            v_min: 0.94,
            v_max: 1.06,
            v_set: 1.0,
            shunt: Complex64::new(0.0, 0.0),
        };
        let gen = |b| Generator {
            bus: b,
            p_min: 0.0,
            p_max: 1.0,
            q_min: -1.0,
            q_max: 1.0,
            p_set: 0.0,
            v_set: 1.0,
            cost: CostCurve { c2: 0.0, c1: 0.0, c0: 0.0 },
        };
        let loads = if load_p > 0.0 {
            vec![crate::netmodel::Load {
                bus: 2,
                p: load_p,
                q: 0.0,
                dispatchable: false,
                p_min: load_p,
                p_max: load_p,
                q_min: 0.0,
                q_max: 0.0,
            }]
        } else {
            vec![]
        };
        Network::new(
            100.0,
            vec![bus(1, BusKind::Slack), bus(2, BusKind::Pv), bus(3, BusKind::Pq)],
            vec![
                Branch { from: 0, to: 1, y_series: Complex64::new(1.0, -10.0), charging: 0.02 },
                Branch { from: 1, to: 2, y_series: Complex64::new(2.0, -8.0), charging: 0.0 },
                Branch { from: 0, to: 2, y_series: Complex64::new(0.5, -5.0), charging: 0.01 },
            ],
            vec![gen(0), gen(1)],
            loads,
        )
        .unwrap()
    }

    #[test]
    fn flat_no_load_case_is_already_solved() {
        let mut net = tiny_network(0.0);
        for b in &mut net.branches {
            b.charging = 0.0;
        }
        let d = Dispatch { p_g: vec![0.0], v_g: vec![1.0, 1.0], p_l: vec![], q_l: vec![] };
        let sol = solve_powerflow(&net, &d, &Contingency::intact(3), &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 1);
        assert!(sol.theta.iter().all(|&t| t == 0.0));
        assert!(sol.v.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(sol.slack_p.abs() < 1e-12 && sol.slack_q.abs() < 1e-12);
        assert!(sol.q_g.iter().all(|q| q.abs() < 1e-12));
    }

    #[test]
    fn converged_solution_balances_power() {
        let net = tiny_network(0.6);
        let d = Dispatch { p_g: vec![0.2], v_g: vec![1.02, 1.01], p_l: vec![], q_l: vec![] };
        let opts = SolverOptions::default();
        let sol = solve_powerflow(&net, &d, &Contingency::new(vec![1.0, 0.5, 2.0]), &opts).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.theta[0], 0.0);
        // Recompute mismatch independently of the solver's own bookkeeping.
        let ybus = assemble_ybus(&net, &Contingency::new(vec![1.0, 0.5, 2.0]));
        let (p, q) = bus_injections(&ybus, &sol.v, &sol.theta);
        assert!((p[1] - 0.2).abs() <= opts.tol);
        assert!((p[2] + 0.6).abs() <= opts.tol);
        assert!(q[2].abs() <= opts.tol);
        // Losses are positive.
        assert!(sol.slack_p + 0.2 - 0.6 > 0.0);
    }

    #[test]
    fn islanded_case14_does_not_converge() {
        let net = parse_case(CASE14).unwrap();
        let d = net.nominal_dispatch();
        let c = Contingency::new(vec![-10.0; net.n_branches()]);
        let sol = solve_powerflow(&net, &d, &c, &SolverOptions::default()).unwrap();
        assert!(!sol.converged);
        assert!(sol.residual_norm.is_finite() && sol.residual_norm > 0.0);
    }

    #[test]
    fn contingency_length_is_checked() {
        let net = parse_case(CASE14).unwrap();
        let d = net.nominal_dispatch();
        let err = solve_powerflow(&net, &d, &Contingency::intact(3), &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, PowerFlowError::Input(_)));
    }

    #[test]
    fn solve_is_bitwise_deterministic() {
        let net = parse_case(CASE14).unwrap();
        let d = net.nominal_dispatch();
        let c = Contingency::new((0..20).map(|i| 0.3 * i as f64 - 1.0).collect());
        let a = solve_powerflow(&net, &d, &c, &SolverOptions::default()).unwrap();
        let b = solve_powerflow(&net, &d, &c, &SolverOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
