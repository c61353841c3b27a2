//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates a scalar function; it does not touch the
//! backward machinery it is used to verify.

use super::tensor::Tensor;

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Worst-case absolute error normalised by the largest reference magnitude.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let scale = numeric
        .data()
        .iter()
        .chain(analytic.data())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic.max_abs_diff(numeric) / scale
}
