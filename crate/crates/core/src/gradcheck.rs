//! Central finite-difference gradient oracle.
//!
//! Independent of the tape: it only evaluates a forward function twice per
//! coordinate. Used by the test suites to validate every analytic backward
//! rule at 64-bit precision.

/// Central difference approximation of the gradient of `f` at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + eps;
        let plus = f(&buf);
        buf[i] = orig - eps;
        let minus = f(&buf);
        buf[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    grad
}

/// Compare analytic and numeric gradients with `|a - n| <= atol + rtol * |n|`
/// per element. Returns the worst offender on failure.
pub fn compare(
    analytic: &[f64],
    numeric: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<(), String> {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let err = (a - n).abs();
        let allowed = atol + rtol * n.abs();
        if err > allowed {
            let excess = err - allowed;
            if worst.map_or(true, |(_, _, _, e)| excess > e) {
                worst = Some((i, a, n, excess));
            }
        }
    }
    match worst {
        None => Ok(()),
        Some((i, a, n, _)) => Err(format!(
            "gradient mismatch at element {i}: analytic {a:.9e} vs numeric {n:.9e} (rtol {rtol:.1e}, atol {atol:.1e})"
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x^2) -> grad 2x
        let x = vec![0.5, -1.25, 2.0];
        let g = central_diff(&mut |v| v.iter().map(|a| a * a).sum(), &x, 1e-5);
        compare(&[1.0, -2.5, 4.0], &g, 1e-6, 1e-9).unwrap();
    }

    #[test]
    fn compare_reports_worst_element() {
        let err = compare(&[1.0, 2.0], &[1.0, 2.5], 1e-3, 1e-9).unwrap_err();
        assert!(err.contains("element 1"), "{err}");
    }
}
