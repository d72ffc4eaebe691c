use crate::{Error, Result};

/// Threshold count of the IoU curve integration used as a cross-check.
pub const SUCCESS_AUC_STEPS: usize = 1001;
/// Threshold count of the center-distance curve over `[0, 2]` m.
pub const PRECISION_STEPS: usize = 201;
/// Distances are compared against thresholds at nanometer resolution, so
/// round-off from frame changes does not miss the zero threshold.
const DISTANCE_RESOLUTION: f64 = 1e-9;

fn validate(values: &[f64], what: &str, range: (f64, f64)) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Invalid(format!("{what}: empty list")));
    }
    if let Some(v) = values.iter().find(|v| !(range.0..=range.1).contains(*v)) {
        return Err(Error::Invalid(format!("{what}: value {v} outside [{}, {}]", range.0, range.1)));
    }
    Ok(())
}

/// Trapezoid area of `count_at` over `steps` uniform thresholds on
/// `[0, upper]`, divided by `upper · n`. Counts are summed as integers so a
/// constant curve integrates exactly.
fn trapezoid(steps: usize, upper: f64, n: usize, count_at: impl Fn(f64) -> usize) -> f64 {
    let mut twice = 0u64;
    let mut prev = count_at(0.0) as u64;
    for i in 1..steps {
        let cur = count_at(upper * i as f64 / (steps - 1) as f64) as u64;
        twice += prev + cur;
        prev = cur;
    }
    twice as f64 / (2.0 * (steps - 1) as f64 * n as f64)
}

/// Area under `t ↦ P(IoU ≥ t)` on `[0, 1]` by trapezoids, ×100.
pub fn success_auc(ious: &[f64], steps: usize) -> Result<f64> {
    validate(ious, "ious", (0.0, 1.0))?;
    if steps < 2 {
        return Err(Error::Invalid("success_auc needs at least two thresholds".into()));
    }
    Ok(100.0 * trapezoid(steps, 1.0, ious.len(), |t| ious.iter().filter(|&&v| v >= t).count()))
}

/// Mean IoU ×100, which is the exact area under the overlap curve.
pub fn success_metric(ious: &[f64]) -> Result<f64> {
    validate(ious, "ious", (0.0, 1.0))?;
    let mean = (100.0 * ious.iter().sum::<f64>() / ious.len() as f64).min(100.0);
    debug_assert!((mean - success_auc(ious, SUCCESS_AUC_STEPS)?).abs() <= 0.1);
    Ok(mean)
}

/// Area under `τ ↦ P(dist ≤ τ)` on `[0, 2]` m, normalized, ×100.
pub fn precision_metric(dists: &[f64]) -> Result<f64> {
    validate(dists, "distances", (0.0, f64::INFINITY))?;
    Ok(100.0
        * trapezoid(PRECISION_STEPS, 2.0, dists.len(), |tau| {
            dists.iter().filter(|&&d| d <= tau + DISTANCE_RESOLUTION).count()
        }))
}
