//! Numerical gradient checking against central finite differences.
//!
//! This module is the independent oracle for every analytic backward pass
//! in the crate: it only ever evaluates a loss closure at perturbed points
//! and never touches the backward implementations it is used to verify.

/// Default perturbation for central differences in f64.
pub const DEFAULT_H: f64 = 1e-5;

/// Central-difference gradient of `loss` w.r.t. the entries of `values`.
///
/// `loss` must be a pure function of the slice contents; the slice is
/// restored to its original state before returning.
pub fn numerical_grad(values: &mut [f64], mut loss: impl FnMut(&[f64]) -> f64, h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; values.len()];
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + h;
        let up = loss(values);
        values[i] = orig - h;
        let down = loss(values);
        values[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error between an analytic and a numerical gradient, as the
/// vector-norm ratio `||a - n|| / (||a|| + ||n||)`. Zero-vs-zero compares
/// as 0.
pub fn relative_error(analytic: &[f64], numerical: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numerical.len(), "gradient length mismatch");
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numerical) {
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let denom = na.sqrt() + nn.sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    diff.sqrt() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_recovered() {
        // f(x) = sum x_i^2, grad = 2x
        let mut x = vec![1.0, -2.0, 0.5];
        let g = numerical_grad(&mut x, |v| v.iter().map(|x| x * x).sum(), DEFAULT_H);
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(relative_error(&analytic, &g) < 1e-9);
        assert_eq!(x, vec![1.0, -2.0, 0.5]); // restored
    }
}
