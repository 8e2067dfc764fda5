//! Central finite differences for verifying analytic gradients.

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `loss` with respect to the values exposed by
/// `values`, perturbing one entry at a time by `±h` and restoring it.
pub fn finite_difference<M>(
    model: &mut M,
    mut values: impl FnMut(&mut M) -> &mut [f64],
    mut loss: impl FnMut(&M) -> f64,
    h: f64,
) -> Vec<f64> {
    let n = values(model).len();
    (0..n)
        .map(|i| {
            let orig = values(model)[i];
            values(model)[i] = orig + h;
            let up = loss(model);
            values(model)[i] = orig - h;
            let down = loss(model);
            values(model)[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut x = vec![1.0, -2.0, 0.5];
        let g = finite_difference(&mut x, |x| x.as_mut_slice(), |x| x.iter().map(|v| v * v * v).sum(), 1e-5);
        let exact: Vec<f64> = [1.0f64, -2.0, 0.5].iter().map(|v| 3.0 * v * v).collect();
        assert!(relative_error(&exact, &g) < 1e-9);
        assert_eq!(x, vec![1.0, -2.0, 0.5]);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
