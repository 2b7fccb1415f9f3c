//! Central finite differences, the independent oracle for every gradient
//! produced by the tape.

use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn finite_difference_grad<F>(mut f: F, at: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = at.clone();
    let mut out = Vec::with_capacity(at.numel());
    for i in 0..at.numel() {
        let x0 = at.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        out.push((up - down) / (2.0 * eps));
    }
    Tensor::new(at.shape().to_vec(), out)
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)` over two gradient
/// buffers of equal length.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| {
            let denom = libm::fabs(a).max(libm::fabs(b)).max(RELATIVE_ERROR_FLOOR);
            libm::fabs(a - b) / denom
        })
        .fold(0.0, f64::max)
}
