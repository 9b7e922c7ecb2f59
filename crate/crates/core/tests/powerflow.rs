//! Power flow against a frozen reference solution of the 14-bus case.
//!
//! Reference values were produced by PYPOWER's Newton solver (flat start,
//! transformer taps set to 1 to match this crate's branch model).

use nalgebra::DMatrix;
use num_complex::Complex64;

use scopf_core::cases::{CASE14, CASE57};
use scopf_core::math::sigmoid;
use scopf_core::powerflow::assemble_ybus;
use scopf_core::severity::economic_cost;
use scopf_core::{parse_case, solve_powerflow, Contingency, SolverOptions};

const REF_VM: [f64; 14] = [
    1.06,
    1.0450000000000002,
    1.0100000000000002,
    1.0294892711599917,
    1.034882707535241,
    1.0699999999999998,
    1.0558758052903017,
    1.09,
    1.0496724015809098,
    1.0458220270822898,
    1.0542951640670033,
    1.0546925776268181,
    1.0494853564995736,
    1.0315436287748871,
];

const REF_VA: [f64; 14] = [
    0.0,
    -0.0864249515902441,
    -0.22018638011991357,
    -0.1818660619465355,
    -0.1563082825535666,
    -0.25607269420306267,
    -0.2365512788293801,
    -0.23655127882938018,
    -0.26475560191291264,
    -0.2681831872346515,
    -0.2643397732282752,
    -0.27080617484855796,
    -0.2718424099544777,
    -0.2854152725398688,
];

const REF_SLACK_P: f64 = 2.3237532410695643;
const REF_QG: [f64; 5] = [
    -0.23530567284740495,
    0.27413301905337945,
    0.18014420984319662,
    0.40364046171981444,
    0.21115737856128958,
];
const REF_COST: f64 = 8171.015155986826;

#[test]
fn case14_nominal_matches_reference() {
    let net = parse_case(CASE14).unwrap();
    let d = net.nominal_dispatch();
    let c = Contingency::intact(net.n_branches());
    let sol = solve_powerflow(&net, &d, &c, &SolverOptions::default()).unwrap();
    assert!(sol.converged);
    assert!(sol.residual_norm <= 1e-8, "{}", sol.residual_norm);
    assert!(sol.iterations <= 6, "{} iterations", sol.iterations);
    for i in 0..14 {
        assert!((sol.v[i] - REF_VM[i]).abs() < 1e-6, "vm[{i}] {} vs {}", sol.v[i], REF_VM[i]);
        assert!((sol.theta[i] - REF_VA[i]).abs() < 1e-6, "va[{i}] {} vs {}", sol.theta[i], REF_VA[i]);
    }
    assert!((sol.slack_p - REF_SLACK_P).abs() < 1e-6);
    for (g, q) in REF_QG.iter().enumerate() {
        assert!((sol.q_g[g] - q).abs() < 1e-6, "qg[{g}] {} vs {q}", sol.q_g[g]);
    }
    let cost = economic_cost(&net, &d, &sol);
    assert!((cost - REF_COST).abs() < 1e-3, "{cost}");
}

#[test]
fn parsed_sizes() {
    let net = parse_case(CASE14).unwrap();
    assert_eq!((net.n_buses(), net.n_branches(), net.generators.len()), (14, 20, 5));
    let net = parse_case(CASE57).unwrap();
    assert_eq!((net.n_buses(), net.n_branches(), net.generators.len()), (57, 80, 7));
}

#[test]
fn case57_nominal_converges() {
    let net = parse_case(CASE57).unwrap();
    let sol = solve_powerflow(
        &net,
        &net.nominal_dispatch(),
        &Contingency::intact(net.n_branches()),
        &SolverOptions::default(),
    )
    .unwrap();
    assert!(sol.converged && sol.residual_norm <= 1e-8);
}

/// Y = Aᵀ diag(y_s) A + diag(shunt + ½ Σ charging) from the branch-bus
/// incidence matrix.
fn incidence_ybus(net: &scopf_core::Network, c: &Contingency) -> DMatrix<Complex64> {
    let n = net.n_buses();
    let m = net.n_branches();
    let zero = Complex64::new(0.0, 0.0);
    let mut a = DMatrix::from_element(m, n, zero);
    let mut ys = DMatrix::from_element(m, m, zero);
    let mut diag = vec![zero; n];
    for (i, b) in net.buses.iter().enumerate() {
        diag[i] += b.shunt;
    }
    for (k, br) in net.branches.iter().enumerate() {
        let s = sigmoid(c.y[k]);
        a[(k, br.from)] = Complex64::new(1.0, 0.0);
        a[(k, br.to)] = Complex64::new(-1.0, 0.0);
        ys[(k, k)] = br.y_series * s;
        let half = Complex64::new(0.0, 0.5 * br.charging * s);
        diag[br.from] += half;
        diag[br.to] += half;
    }
    a.transpose() * ys * a + DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag))
}

#[test]
fn ybus_matches_incidence_assembly() {
    for text in [CASE14, CASE57] {
        let net = parse_case(text).unwrap();
        let y: Vec<f64> = (0..net.n_branches()).map(|k| ((k * 37 % 11) as f64 - 5.0) * 0.9).collect();
        for c in [Contingency::intact(net.n_branches()), Contingency::new(y)] {
            let a = assemble_ybus(&net, &c);
            let b = incidence_ybus(&net, &c);
            let err = (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{err}");
        }
    }
}

#[test]
fn cutting_a_line_changes_the_solution_continuously() {
    let net = parse_case(CASE14).unwrap();
    let d = net.nominal_dispatch();
    let opts = SolverOptions::default();
    let base = solve_powerflow(&net, &d, &Contingency::intact(20), &opts).unwrap();
    let mut prev = 0.0;
    for y in [6.0, 2.0, 0.0, -2.0, -6.0] {
        let mut c = Contingency::intact(20);
        c.y[13] = y;
        let sol = solve_powerflow(&net, &d, &c, &opts).unwrap();
        assert!(sol.converged);
        let shift = (sol.theta[7] - base.theta[7]).abs();
        assert!(shift >= prev, "angle shift should grow as the 7-8 line weakens");
        prev = shift;
    }
}
