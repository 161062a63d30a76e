/// Denominator floor of the relative error, so that gradients which are
/// zero analytically and numerically do not divide by zero.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare `analytic` against central differences of `f` around `point`.
///
/// The relative error of element `i` is `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn grad_check(point: &[f64], analytic: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> GradCheck {
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let hi = f(&x);
        x[i] = orig - eps;
        let lo = f(&x);
        x[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > out.max_rel_error || rel.is_nan() {
            out = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    out
}
