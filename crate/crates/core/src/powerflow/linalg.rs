use nalgebra::{DMatrix, DVector};

/// Solve `a x = b`. Falls back to the Tikhonov-regularised normal equations
/// `(aᵀa + λI) x = aᵀb` when `a` cannot be factorised or yields a
/// non-finite solution.
pub(crate) fn solve(a: &DMatrix<f64>, b: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let rhs = DVector::from_column_slice(b);
    if let Some(x) = a.clone().lu().solve(&rhs) {
        if x.iter().all(|v| v.is_finite()) {
            return Some(x.as_slice().to_vec());
        }
    }
    if lambda <= 0.0 {
        return None;
    }
    let at = a.transpose();
    let mut normal = &at * a;
    for i in 0..normal.nrows() {
        normal[(i, i)] += lambda;
    }
    let x = normal.lu().solve(&(at * rhs))?;
    x.iter().all(|v| v.is_finite()).then(|| x.as_slice().to_vec())
}
