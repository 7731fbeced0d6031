//! Central-difference gradient checking.
//!
//! The checker only ever calls the loss as a black box, so it stays
//! independent of whatever analytic path produced the gradient under test.

use ndarray::Array3;

/// Central difference of `f` at `point` along flat coordinate `coord`.
pub fn central_difference<F>(f: &F, point: &Array3<f64>, coord: usize, h: f64) -> f64
where
    F: Fn(&Array3<f64>) -> f64,
{
    let mut plus = point.clone();
    let mut minus = point.clone();
    {
        let p = plus.as_slice_mut().expect("contiguous tensor");
        p[coord] += h;
    }
    {
        let m = minus.as_slice_mut().expect("contiguous tensor");
        m[coord] -= h;
    }
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error between an analytic derivative and its finite-difference
/// estimate, guarded against tiny denominators.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}
