//! Central-finite-difference verification of tape gradients.

use super::scalar::Scalar;
use super::tape::{AutodiffError, Result, Tape};
use super::tensor::Tensor;
use rand::{Rng, RngExt};

/// A scalar-valued function of one tensor, rebuilt on a fresh tape per call.
pub trait ScalarFn<T: Scalar>: Fn(&mut Tape<T>, &Tensor<T>) -> Result<Tensor<T>> {}
impl<T: Scalar, F: Fn(&mut Tape<T>, &Tensor<T>) -> Result<Tensor<T>>> ScalarFn<T> for F {}

fn eval_plain<T: Scalar>(f: &impl ScalarFn<T>, x: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::inference();
    let out = f(&mut tape, x)?;
    if out.len() != 1 {
        return Err(AutodiffError::NotScalar { len: out.len() });
    }
    let v = out.item().to_f64();
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

fn analytic_gradient<T: Scalar>(f: &impl ScalarFn<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x);
    let out = f(&mut tape, &leaf)?;
    if out.len() != 1 {
        return Err(AutodiffError::NotScalar { len: out.len() });
    }
    if !out.is_recorded() {
        // f is constant with respect to x
        return Ok(vec![0.0; x.len()]);
    }
    let grads = tape.backward(&out)?;
    Ok(grads.get_or_zeros(&leaf).to_f64_vec())
}

fn central_difference<T: Scalar>(
    f: &impl ScalarFn<T>,
    x: &Tensor<T>,
    coord: usize,
    eps: f64,
) -> Result<f64> {
    let base = x.to_f64_vec();
    let mut plus = base.clone();
    plus[coord] += eps;
    let mut minus = base;
    minus[coord] -= eps;
    let shape = x.shape().to_vec();
    let fp = eval_plain(f, &Tensor::from_f64_slice(shape.clone(), &plus))?;
    let fm = eval_plain(f, &Tensor::from_f64_slice(shape, &minus))?;
    Ok((fp - fm) / (2.0 * eps))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Checks every coordinate of `x`; returns the maximum relative error
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<T: Scalar>(f: impl ScalarFn<T>, x: &Tensor<T>, eps: f64) -> Result<f64> {
    assert!(eps > 0.0, "eps must be positive");
    let analytic = analytic_gradient(&f, x)?;
    let mut worst = 0.0f64;
    for coord in 0..x.len() {
        let numeric = central_difference(&f, x, coord, eps)?;
        worst = worst.max(relative_error(analytic[coord], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`] over a random subset of coordinates; the practical
/// choice when `x` has many thousands of entries.
pub fn grad_check_sampled<T: Scalar, R: Rng>(
    f: impl ScalarFn<T>,
    x: &Tensor<T>,
    eps: f64,
    n_coords: usize,
    rng: &mut R,
) -> Result<f64> {
    assert!(eps > 0.0, "eps must be positive");
    let analytic = analytic_gradient(&f, x)?;
    let mut worst = 0.0f64;
    for _ in 0..n_coords.min(x.len()) {
        let coord = rng.random_range(0..x.len());
        let numeric = central_difference(&f, x, coord, eps)?;
        worst = worst.max(relative_error(analytic[coord], numeric));
    }
    Ok(worst)
}
