//! Security-constrained AC optimal power flow by adversarial sampling.
//!
//! The crate is organised bottom-up:
//!
//! - [`netmodel`]: MATPOWER case parsing, the dispatch box and its logit
//!   reparameterisation.
//! - [`powerflow`]: contingency-scaled Y-bus, Newton–Raphson AC power flow and
//!   adjoint gradients of scalar functionals of the solved state.
//! - [`severity`]: hinge-penalised severity, Gaussian line-strength prior and
//!   the two population potentials used by the attack/defend loop.
//! - [`sampler`]: Metropolis-adjusted Langevin chains with counter-based RNG
//!   streams.
//! - [`scopf`]: the sequential Monte Carlo driver, standalone contingency
//!   prediction and the alternating gradient baseline.
//! - [`stresstest`]: Monte Carlo robustness evaluation of a dispatch.
//!
//! Population work fans out over rayon when the `parallel` feature is on
//! (the default); every reduction happens in index order so results do not
//! depend on the thread count.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod exec;
pub mod math;
pub mod netmodel;
pub mod powerflow;
pub mod rng;
pub mod sampler;
pub mod scopf;
pub mod severity;
pub mod stresstest;

/// Bundled IEEE test cases in MATPOWER format.
pub mod cases {
    /// IEEE 14-bus system.
    pub const CASE14: &str = include_str!("../data/case14.m");
    /// IEEE 57-bus system.
    pub const CASE57: &str = include_str!("../data/case57.m");
}

pub use netmodel::{parse_case, CaseOptions, Dispatch, DispatchBox, Network};
pub use powerflow::{solve_powerflow, Contingency, PowerFlowSolution, SolverOptions};
pub use severity::{PenaltyParams, PriorParams, Scorer, SeverityReport};
