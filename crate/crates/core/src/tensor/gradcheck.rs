use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `at`.
///
/// Each coordinate is probed at `x ± eps`. The quotient divides by the step
/// actually representable in `f32`, so rounding of the probe points does not
/// bias the estimate.
pub fn finite_diff_gradient<F>(mut f: F, at: &Tensor, eps: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArg(format!("finite-difference step {eps}")));
    }
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.len());
    for j in 0..at.len() {
        let x = at.data()[j];
        let (hi, lo) = (x + eps, x - eps);
        probe.data_mut()[j] = hi;
        let f_hi = f(&probe)?;
        probe.data_mut()[j] = lo;
        let f_lo = f(&probe)?;
        probe.data_mut()[j] = x;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::NonFinite(format!("probe of coordinate {j}")));
        }
        grad.push(((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32);
    }
    Tensor::new(at.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(
            |t| Ok((t.data()[0] as f64).powi(2)),
            &Tensor::scalar(3.0),
            1e-3,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-3);
    }

    #[test]
    fn constant_function_is_flat() {
        let at = Tensor::new(vec![2, 2], vec![0.1, -4.0, 2.5, 9.0]).unwrap();
        let g = finite_diff_gradient(|_| Ok(7.5), &at, 1e-3).unwrap();
        assert_eq!(g, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let at = Tensor::scalar(0.0);
        let r = finite_diff_gradient(|t| Ok(1.0 / t.data()[0] as f64 - 1e300 * 1e300), &at, 1e-3);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
