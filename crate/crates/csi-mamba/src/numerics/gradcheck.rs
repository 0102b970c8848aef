//! Finite-difference gradient oracle.
//!
//! Central differences evaluated coordinate by coordinate. Intentionally
//! independent of the tape: the function under test is re-run on perturbed
//! leaf tensors with gradient recording disabled.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::{no_grad, Tensor};

/// Central-difference gradient of a scalar-valued function at `x`.
pub fn finite_difference_gradient<E, F>(f: F, x: &Tensor<E>, h: f64) -> Result<Tensor<E>>
where
    E: Scalar,
    F: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    let eval = |data: Vec<E>| -> Result<f64> {
        let t = Tensor::new(data, x.shape());
        let out = no_grad(|| f(&t))?;
        if out.numel() != 1 {
            return Err(Error::Numeric(format!(
                "finite differences require a scalar function, got {} elements",
                out.numel()
            )));
        }
        let v = out.item().to_f64();
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value {v} during finite differencing"
            )));
        }
        Ok(v)
    };

    let base: Vec<E> = x.data().to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = E::from_f64(plus[i].to_f64() + h);
        let mut minus = base.clone();
        minus[i] = E::from_f64(minus[i].to_f64() - h);
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        grad.push(E::from_f64((fp - fm) / (2.0 * h)));
    }
    Ok(Tensor::new(grad, x.shape()))
}

/// Max relative error between two gradient vectors, with the denominator
/// floored at 1e-6 so near-zero entries compare absolutely.
pub fn max_relative_error<E: Scalar>(analytic: &[E], numeric: &[E]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let (a, n) = (a.to_f64(), n.to_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative_at_three() {
        let f = |x: &Tensor<f64>| x.mul(x).map(|y| y.sum_all());
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_difference_gradient(f, &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let f = |_x: &Tensor<f64>| Ok(Tensor::scalar(42.0));
        let x = Tensor::<f64>::new(vec![1.0, -2.0, 3.0], &[3]);
        let g = finite_difference_gradient(f, &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn silu_tape_gradient_matches_oracle() {
        let data = vec![0.9, -1.3, 0.2, 2.7, -0.05, 0.6, 1.1, -2.2];
        let f = |x: &Tensor<f64>| Ok(x.silu().sum_all());
        let x = Tensor::<f64>::param(data.clone(), &[2, 4]);
        f(&x).unwrap().backward().unwrap();
        let fd = finite_difference_gradient(f, &Tensor::new(data, &[2, 4]), 1e-6).unwrap();
        let err = max_relative_error(&x.grad().unwrap(), fd.data());
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn non_finite_values_are_reported() {
        let f = |x: &Tensor<f64>| Ok(x.scale(f64::INFINITY).sum_all());
        let x = Tensor::<f64>::scalar(1.0);
        assert!(finite_difference_gradient(f, &x, 1e-5).is_err());
    }
}
