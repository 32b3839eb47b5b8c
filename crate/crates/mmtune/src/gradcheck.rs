//! Central finite differences, the independent oracle used to check every
//! analytic gradient in this crate.

use crate::tensor::Tensor;

/// Numerical gradient of a scalar-valued function by central differences:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` per coordinate.
///
/// The function must be deterministic. The caller compares against analytic
/// gradients with a tolerance of its choosing.
pub fn finite_diff_check(f: impl Fn(&Tensor) -> f64, point: &Tensor, eps: f64) -> Tensor {
    let mut grad = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Largest relative error between analytic and numerical gradients, with an
/// absolute floor of 1 in the denominator so near-zero entries compare on an
/// absolute scale.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
