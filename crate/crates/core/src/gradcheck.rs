//! Central-difference gradient oracle.
//!
//! Evaluates `f` as a black box in f64, so it stays independent of the tape
//! backward pass it is used to check.

/// Central differences `(f(p + h e_k) - f(p - h e_k)) / 2h` per coordinate.
pub fn finite_difference_grad<F>(f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut grad = Vec::with_capacity(params.len());
    let mut probe = params.to_vec();
    for k in 0..params.len() {
        let original = probe[k];
        probe[k] = original + h;
        let plus = f(&probe);
        probe[k] = original - h;
        let minus = f(&probe);
        probe[k] = original;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_slope() {
        let grad = finite_difference_grad(|p| p[0] * p[0], &[3.0], 1e-3);
        assert!((grad[0] - 6.0).abs() < 1e-6, "got {}", grad[0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let grad = finite_difference_grad(|_| 4.25, &[1.0, -2.0, 0.5], 1e-3);
        assert_eq!(grad, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn multivariate_linear() {
        let grad = finite_difference_grad(|p| 2.0 * p[0] - 5.0 * p[1], &[1.0, 1.0], 1e-3);
        assert!((grad[0] - 2.0).abs() < 1e-9);
        assert!((grad[1] + 5.0).abs() < 1e-9);
    }
}
