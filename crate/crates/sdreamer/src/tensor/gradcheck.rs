//! Numerical gradient checking against central finite differences.
//!
//! The checker evaluates the loss as a plain function of flattened inputs and
//! never touches the tape's backward pass, so it serves as an independent
//! reference for analytic gradients.

/// Central-difference gradient of `f` at `x0`, one coordinate at a time:
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
pub fn finite_diff(x0: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor so near-zero entries compare on absolute terms.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Convenience wrapper: check an analytic gradient against central
/// differences with the standard step `1e-5` and tolerance `1e-4`.
pub fn assert_close_to_fd(
    label: &str,
    x0: &[f64],
    analytic: &[f64],
    f: impl FnMut(&[f64]) -> f64,
) {
    let numeric = finite_diff(x0, 1e-5, f);
    let err = max_rel_error(analytic, &numeric, 1e-6);
    assert!(
        err <= 1e-4,
        "{}: max relative gradient error {:.3e} exceeds 1e-4",
        label,
        err
    );
}
