//! Verification utilities shared by unit and integration tests.
//!
//! The central finite-difference check here is deliberately independent of
//! the backward implementations it validates: it only re-runs forward
//! passes at perturbed inputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with the denominator floored at 1.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Central finite-difference gradient of `f` w.r.t. `x`, element by element.
pub fn finite_diff_grad(x: &Tensor, f: &mut dyn FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let fp = f(&xp);
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let fm = f(&xm);
        grad.data_mut()[i] = (fp - fm) / (2.0 * FD_STEP);
    }
    grad
}

/// Assert that an analytic gradient matches the central finite difference
/// of the given scalar function at `x`.
pub fn assert_grad_close(
    analytic: &Tensor,
    x: &Tensor,
    f: &mut dyn FnMut(&Tensor) -> f64,
    label: &str,
) {
    let numeric = finite_diff_grad(x, f);
    for i in 0..x.len() {
        let (a, n) = (analytic.data()[i], numeric.data()[i]);
        let e = rel_err(a, n);
        assert!(
            e < FD_TOL,
            "{label}: gradient mismatch at element {i}: analytic {a}, numeric {n}, rel err {e}"
        );
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}
