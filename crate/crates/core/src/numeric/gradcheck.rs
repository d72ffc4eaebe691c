/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares `analytic` against central differences of `f` at `params`.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length");
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coordinates: params.len(),
    };
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let plus = f(&probe);
        probe[i] = params[i] - h;
        let minus = f(&probe);
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = i;
        }
    }
    report
}
