//! Central-difference gradient estimates, used as an independent oracle for
//! the tape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Estimate `∇f(point)` element by element with `(f(p + h) − f(p − h)) / 2h`.
pub fn finite_diff_gradient<F>(mut f: F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = point.clone();
    let mut grad = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(point.shape().to_vec(), grad)
}

/// Relative error `|a − b| / max(|a|, |b|, floor)` used by gradient checks.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|t| Ok(t.item().powi(2)), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_gradient(|_| Ok(4.2), &p, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn abs_in_smooth_region() {
        let g = finite_diff_gradient(|t| Ok(t.item().abs()), &Tensor::scalar(1.0), 1e-5).unwrap();
        assert!((g.item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_gradient(|_| Ok(0.0), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
