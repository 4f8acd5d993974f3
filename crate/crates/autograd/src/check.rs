//! Finite-difference utilities used to verify analytic gradients in tests.

use crate::tape::Arr;

/// Central-difference gradient of a scalar function `f` at `x`.
///
/// Perturbs each element of `x` by ±`eps` and evaluates `f` twice, so it is
/// O(2·len) function evaluations — fine for the small tensors used in tests.
pub fn central_diff(x: &Arr, eps: f64, mut f: impl FnMut(&Arr) -> f64) -> Arr {
    let mut grad = Arr::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let slot = probe.as_slice_mut().expect("probe contiguous");
        let orig = slot[idx];
        slot[idx] = orig + eps;
        let hi = f(&probe);
        let slot = probe.as_slice_mut().unwrap();
        slot[idx] = orig - eps;
        let lo = f(&probe);
        let slot = probe.as_slice_mut().unwrap();
        slot[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Relative difference between two gradients:
/// `max|a-b| / max(1e-8, max|a|, max|b|)`.
pub fn max_rel_diff(a: &Arr, b: &Arr) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let denom = a
        .iter()
        .chain(b.iter())
        .fold(1e-8_f64, |m, &v| m.max(v.abs()));
    let num = a
        .iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (&x, &y)| m.max((x - y).abs()));
    num / denom
}

/// Assert that the analytic gradient agrees with a finite-difference one.
pub fn assert_grads_close(analytic: &Arr, numeric: &Arr, tol: f64) {
    let rel = max_rel_diff(analytic, numeric);
    assert!(
        rel <= tol,
        "gradient mismatch: max relative difference {rel:.3e} exceeds {tol:.1e}"
    );
}
