//! Central finite-difference gradient checking.

/// Central difference of `f` at `x` along every coordinate.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + eps;
            let fp = f(&probe);
            probe[k] = x[k] - eps;
            let fm = f(&probe);
            probe[k] = x[k];
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub max_relative_error: f64,
    pub worst_index: usize,
    /// False when the estimates at `eps` and `eps / 10` disagree, which
    /// signals a discontinuity inside the stencil.
    pub smooth: bool,
}

/// Compares `analytic` against central differences at `eps`, using a second
/// estimate at `eps / 10` to detect non-smooth points.
pub fn compare(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    floor: f64,
) -> Comparison {
    assert_eq!(x.len(), analytic.len());
    let coarse = central_difference(f, x, eps);
    let fine = central_difference(f, x, eps / 10.0);
    let mut out = Comparison {
        max_relative_error: 0.0,
        worst_index: 0,
        smooth: true,
    };
    for k in 0..x.len() {
        if relative_error(coarse[k], fine[k], floor) > 1e-2 {
            out.smooth = false;
        }
        let e = relative_error(analytic[k], coarse[k], floor);
        if e > out.max_relative_error {
            out.max_relative_error = e;
            out.worst_index = k;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratics() {
        let mut f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1];
        let g = central_difference(&mut f, &[1.0, 2.0], 1e-3);
        assert!((g[0] - 8.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn flags_a_step() {
        let mut f = |x: &[f64]| if x[0] > 0.0 { 1.0 } else { 0.0 };
        let c = compare(&mut f, &[1e-5], &[0.0], 1e-4, 1e-6);
        assert!(!c.smooth);
    }
}
