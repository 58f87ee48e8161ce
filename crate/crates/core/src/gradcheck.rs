//! Central finite differences, used as an independent oracle for the
//! analytic gradients produced by the tape.

/// Numerical gradient of `f` at `x` by central differences with the given
/// step, perturbing one coordinate at a time.
pub fn central_difference<F>(x: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest elementwise relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps coordinates whose true gradient is (numerically) zero from
/// dividing round-off by round-off.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Step used throughout the test suites.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor used throughout the test suites.
pub const FD_FLOOR: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient() {
        let g = central_difference(&[2.0, -1.0], 1e-5, |x| x[0].powi(3) + 3.0 * x[1]);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
