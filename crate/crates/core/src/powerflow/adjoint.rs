//! Gradients of scalar functionals of the solved power-flow state.
//!
//! For a functional G(w, p) of the full voltage state w and parameters p
//! (dispatch and branch scales), with the Newton unknowns u ⊂ w defined
//! implicitly by F(u, p) = 0, the total derivative is
//!
//! ```text
//! dG/dp = ∂G/∂p − λᵀ ∂F/∂p,    Jᵀ λ = ∂G/∂u,
//! ```
//!
//! with J = ∂F/∂u evaluated at the returned iterate. Chain rules through the
//! logit dispatch map and the sigmoid line scaling are applied at the end.

use thiserror::Error;

use super::injections::{branch_scale_derivatives, InjectionDerivatives};
use super::{assemble_ybus, linalg, solve_powerflow, Contingency, PowerFlowError, PowerFlowSolution, SolverOptions, StateLayout};
use crate::math::sigmoid_prime;
use crate::netmodel::{Dispatch, DispatchBox, DispatchError, Network};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradientError {
    #[error("adjoint system is singular even with regularisation; fall back to finite differences")]
    Singular,
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

/// Everything a functional may read about a solved operating point.
pub struct OperatingPoint<'a> {
    pub network: &'a Network,
    pub dispatch: &'a Dispatch,
    pub contingency: &'a Contingency,
    pub solution: &'a PowerFlowSolution,
    pub layout: StateLayout,
    /// Bus demand implied by the dispatch.
    pub pd: Vec<f64>,
    pub qd: Vec<f64>,
}

impl<'a> OperatingPoint<'a> {
    pub fn new(
        network: &'a Network,
        dispatch: &'a Dispatch,
        contingency: &'a Contingency,
        solution: &'a PowerFlowSolution,
    ) -> Self {
        let (pd, qd) = network.bus_demand(dispatch);
        Self {
            network,
            dispatch,
            contingency,
            solution,
            layout: StateLayout::new(network),
            pd,
            qd,
        }
    }
}

/// Explicit partial derivatives of a functional, holding everything else
/// fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Sensitivity {
    /// With respect to the computed net injections `p_calc`, `q_calc`.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// With respect to voltage magnitudes and angles.
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    /// With respect to the flattened physical dispatch.
    pub dispatch: Vec<f64>,
    /// With respect to the mismatch vector (row order of [`StateLayout`]).
    pub mismatch: Vec<f64>,
}

impl Sensitivity {
    pub fn zeros(point: &OperatingPoint<'_>) -> Self {
        let n = point.network.n_buses();
        Self {
            p: vec![0.0; n],
            q: vec![0.0; n],
            vm: vec![0.0; n],
            va: vec![0.0; n],
            dispatch: vec![0.0; point.network.shape().len()],
            mismatch: vec![0.0; point.layout.dim()],
        }
    }
}

/// A scalar of the operating point together with its explicit partials.
pub trait Functional {
    fn evaluate(&self, point: &OperatingPoint<'_>) -> (f64, Sensitivity);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub value: f64,
    /// With respect to the unconstrained dispatch coordinates.
    pub z: Vec<f64>,
    /// With respect to the flattened physical dispatch.
    pub dispatch: Vec<f64>,
    /// With respect to the line strengths y.
    pub contingency: Vec<f64>,
}

/// Adjoint gradient of `functional` at a solved point.
pub fn grad_scalar<F: Functional + ?Sized>(
    network: &Network,
    dbox: &DispatchBox,
    dispatch: &Dispatch,
    contingency: &Contingency,
    solution: &PowerFlowSolution,
    functional: &F,
    options: &SolverOptions,
) -> Result<Gradient, GradientError> {
    let point = OperatingPoint::new(network, dispatch, contingency, solution);
    let (value, sens) = functional.evaluate(&point);
    let layout = &point.layout;
    let n = network.n_buses();

    let ybus = assemble_ybus(network, contingency);
    let (vm, va) = (&solution.v, &solution.theta);
    let der = InjectionDerivatives::new(&ybus, vm, va, &solution.p_calc, &solution.q_calc);

    // Effective weights on P_calc and Q_calc, mismatch rows folded in.
    let mut wp = sens.p.clone();
    let mut wq = sens.q.clone();
    for i in 0..n {
        if let Some(r) = layout.p_row[i] {
            wp[i] += sens.mismatch[r];
        }
        if let Some(r) = layout.q_row[i] {
            wq[i] += sens.mismatch[r];
        }
    }

    let state_grad = |wp: &[f64], wq: &[f64], k: usize, angle: bool| -> f64 {
        let (dp, dq, direct) = if angle {
            (&der.dp_dva, &der.dq_dva, sens.va[k])
        } else {
            (&der.dp_dvm, &der.dq_dvm, sens.vm[k])
        };
        direct + (0..n).map(|i| wp[i] * dp[(i, k)] + wq[i] * dq[(i, k)]).sum::<f64>()
    };

    let g_u: Vec<f64> = layout
        .angle_buses
        .iter()
        .map(|&k| state_grad(&wp, &wq, k, true))
        .chain(layout.magnitude_buses.iter().map(|&k| state_grad(&wp, &wq, k, false)))
        .collect();
    let jac_t = der.jacobian(layout).transpose();
    let lambda = if g_u.is_empty() {
        Vec::new()
    } else {
        linalg::solve(&jac_t, &g_u, options.jacobian_regularization).ok_or(GradientError::Singular)?
    };

    // Fold the adjoint into the weights: w' = w − λ on the matching rows.
    let mut row_weight = sens.mismatch.clone();
    for i in 0..n {
        if let Some(r) = layout.p_row[i] {
            wp[i] -= lambda[r];
            row_weight[r] -= lambda[r];
        }
        if let Some(r) = layout.q_row[i] {
            wq[i] -= lambda[r];
            row_weight[r] -= lambda[r];
        }
    }

    let shape = network.shape();
    let mut d_phys = sens.dispatch.clone();
    // Scheduled injections enter the mismatch with a minus sign.
    for (k, &g) in network.dispatched_generators().iter().enumerate() {
        if let Some(r) = layout.p_row[network.generators[g].bus] {
            d_phys[shape.pg_offset() + k] -= row_weight[r];
        }
    }
    for (k, &l) in network.dispatchable_loads().iter().enumerate() {
        let bus = network.loads[l].bus;
        if let Some(r) = layout.p_row[bus] {
            d_phys[shape.pl_offset() + k] += row_weight[r];
        }
        if let Some(r) = layout.q_row[bus] {
            d_phys[shape.ql_offset() + k] += row_weight[r];
        }
    }
    for (k, &b) in network.generator_buses().iter().enumerate() {
        d_phys[shape.vg_offset() + k] += state_grad(&wp, &wq, b, false);
    }

    let ds = branch_scale_derivatives(network, vm, va);
    let d_y: Vec<f64> = network
        .branches
        .iter()
        .zip(&ds)
        .zip(&contingency.y)
        .map(|((br, (sf, st)), &y)| {
            let g = wp[br.from] * sf.re + wq[br.from] * sf.im + wp[br.to] * st.re + wq[br.to] * st.im;
            g * sigmoid_prime(y)
        })
        .collect();

    let d_z = dbox
        .free_indices()
        .iter()
        .zip(dbox.jacobian_diag(dispatch))
        .map(|(&i, j)| d_phys[i] * j)
        .collect();

    Ok(Gradient {
        value,
        z: d_z,
        dispatch: d_phys,
        contingency: d_y,
    })
}

/// Central finite-difference gradient with respect to the unconstrained
/// dispatch `z` and the line strengths. Each component costs two solves.
pub fn grad_scalar_fd<F: Functional + ?Sized>(
    network: &Network,
    dbox: &DispatchBox,
    z: &[f64],
    contingency: &Contingency,
    functional: &F,
    options: &SolverOptions,
    h: f64,
) -> Result<Gradient, GradientError> {
    let eval = |z: &[f64], c: &Contingency| -> Result<f64, GradientError> {
        let d = dbox.from_unconstrained(z)?;
        let sol = solve_powerflow(network, &d, c, options)?;
        let point = OperatingPoint::new(network, &d, c, &sol);
        Ok(functional.evaluate(&point).0)
    };
    let value = eval(z, contingency)?;
    let mut d_z = Vec::with_capacity(z.len());
    for j in 0..z.len() {
        let mut zp = z.to_vec();
        zp[j] += h;
        let mut zm = z.to_vec();
        zm[j] -= h;
        d_z.push((eval(&zp, contingency)? - eval(&zm, contingency)?) / (2.0 * h));
    }
    let mut d_y = Vec::with_capacity(contingency.len());
    for b in 0..contingency.len() {
        let mut cp = contingency.clone();
        cp.y[b] += h;
        let mut cm = contingency.clone();
        cm.y[b] -= h;
        d_y.push((eval(z, &cp)? - eval(z, &cm)?) / (2.0 * h));
    }
    let d = dbox.from_unconstrained(z)?;
    let mut d_phys = vec![0.0; dbox.len()];
    for ((&i, j), g) in dbox.free_indices().iter().zip(dbox.jacobian_diag(&d)).zip(&d_z) {
        d_phys[i] = g / j;
    }
    Ok(Gradient {
        value,
        z: d_z,
        dispatch: d_phys,
        contingency: d_y,
    })
}
