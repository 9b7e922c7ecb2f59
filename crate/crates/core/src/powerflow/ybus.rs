use nalgebra::DMatrix;
use num_complex::Complex64;

use super::Contingency;
use crate::math::sigmoid;
use crate::netmodel::Network;

/// Nodal admittance matrix with every branch (series admittance and
/// charging) scaled by σ(yᵢ). Bus shunts are not scaled.
pub fn assemble_ybus(network: &Network, contingency: &Contingency) -> DMatrix<Complex64> {
    let n = network.n_buses();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for (i, bus) in network.buses.iter().enumerate() {
        y[(i, i)] += bus.shunt;
    }
    for (br, &strength) in network.branches.iter().zip(&contingency.y) {
        let s = sigmoid(strength);
        let ys = br.y_series * s;
        let half_b = Complex64::new(0.0, 0.5 * br.charging * s);
        y[(br.from, br.from)] += ys + half_b;
        y[(br.to, br.to)] += ys + half_b;
        y[(br.from, br.to)] -= ys;
        y[(br.to, br.from)] -= ys;
    }
    y
}
