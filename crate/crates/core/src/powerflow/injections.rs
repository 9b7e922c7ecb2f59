use nalgebra::DMatrix;
use num_complex::Complex64;

use super::StateLayout;
use crate::netmodel::Network;

/// Net real and reactive injection at every bus for the polar state
/// (`vm`, `va`).
pub fn bus_injections(ybus: &DMatrix<Complex64>, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = vm.len();
    let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let mut current = Complex64::new(0.0, 0.0);
        for k in 0..n {
            let y = ybus[(i, k)];
            if y.re != 0.0 || y.im != 0.0 {
                current += y * v[k];
            }
        }
        let s = v[i] * current.conj();
        p[i] = s.re;
        q[i] = s.im;
    }
    (p, q)
}

/// Partial derivatives of the bus injections with respect to every voltage
/// magnitude and angle.
pub struct InjectionDerivatives {
    pub dp_dva: DMatrix<f64>,
    pub dp_dvm: DMatrix<f64>,
    pub dq_dva: DMatrix<f64>,
    pub dq_dvm: DMatrix<f64>,
}

impl InjectionDerivatives {
    pub fn new(ybus: &DMatrix<Complex64>, vm: &[f64], va: &[f64], p: &[f64], q: &[f64]) -> Self {
        let n = vm.len();
        let mut dp_dva = DMatrix::zeros(n, n);
        let mut dp_dvm = DMatrix::zeros(n, n);
        let mut dq_dva = DMatrix::zeros(n, n);
        let mut dq_dvm = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in 0..n {
                if i == k {
                    continue;
                }
                let y = ybus[(i, k)];
                if y.re == 0.0 && y.im == 0.0 {
                    continue;
                }
                let (g, b) = (y.re, y.im);
                let (s, c) = (va[i] - va[k]).sin_cos();
                let gc_bs = g * c + b * s;
                let gs_bc = g * s - b * c;
                dp_dva[(i, k)] = vm[i] * vm[k] * gs_bc;
                dq_dva[(i, k)] = -vm[i] * vm[k] * gc_bs;
                dp_dvm[(i, k)] = vm[i] * gc_bs;
                dq_dvm[(i, k)] = vm[i] * gs_bc;
            }
            let y = ybus[(i, i)];
            let v2 = vm[i] * vm[i];
            dp_dva[(i, i)] = -q[i] - y.im * v2;
            dq_dva[(i, i)] = p[i] - y.re * v2;
            dp_dvm[(i, i)] = p[i] / vm[i] + y.re * vm[i];
            dq_dvm[(i, i)] = q[i] / vm[i] - y.im * vm[i];
        }
        Self {
            dp_dva,
            dp_dvm,
            dq_dva,
            dq_dvm,
        }
    }

    /// Newton Jacobian of the mismatch equations in `layout` order.
    pub fn jacobian(&self, layout: &StateLayout) -> DMatrix<f64> {
        let dim = layout.dim();
        let na = layout.angle_buses.len();
        let mut j = DMatrix::zeros(dim, dim);
        let rows = layout
            .angle_buses
            .iter()
            .map(|&i| (&self.dp_dva, &self.dp_dvm, i))
            .chain(layout.magnitude_buses.iter().map(|&i| (&self.dq_dva, &self.dq_dvm, i)));
        for (r, (d_va, d_vm, i)) in rows.enumerate() {
            for (c, &k) in layout.angle_buses.iter().enumerate() {
                j[(r, c)] = d_va[(i, k)];
            }
            for (c, &k) in layout.magnitude_buses.iter().enumerate() {
                j[(r, na + c)] = d_vm[(i, k)];
            }
        }
        j
    }
}

/// Derivative of the complex injections at both ends of each branch with
/// respect to that branch's admittance scale. Returns `(from, to)` powers
/// per branch.
pub(crate) fn branch_scale_derivatives(network: &Network, vm: &[f64], va: &[f64]) -> Vec<(Complex64, Complex64)> {
    network
        .branches
        .iter()
        .map(|br| {
            let vf = Complex64::from_polar(vm[br.from], va[br.from]);
            let vt = Complex64::from_polar(vm[br.to], va[br.to]);
            let self_y = br.y_series + Complex64::new(0.0, 0.5 * br.charging);
            let i_from = self_y * vf - br.y_series * vt;
            let i_to = self_y * vt - br.y_series * vf;
            (vf * i_from.conj(), vt * i_to.conj())
        })
        .collect()
}
