//! Finite-difference verification of reverse-mode gradients.

use super::NumericsError;

/// A scalar-valued function with a reverse-mode gradient.
pub trait DiffFn {
    fn value(&self, x: &[f64]) -> Result<f64, NumericsError>;
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), NumericsError>;
}

impl<V, G> DiffFn for (V, G)
where
    V: Fn(&[f64]) -> Result<f64, NumericsError>,
    G: Fn(&[f64]) -> Result<(f64, Vec<f64>), NumericsError>,
{
    fn value(&self, x: &[f64]) -> Result<f64, NumericsError> {
        (self.0)(x)
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), NumericsError> {
        (self.1)(x)
    }
}

/// Outcome of a coordinate-wise gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    /// Coordinate with the largest relative error among the checked ones.
    pub worst_coord: usize,
    pub worst_rel_err: f64,
    /// Coordinates skipped because one-sided slopes disagree (the function is
    /// not smooth there, e.g. relu probed exactly at its kink).
    pub skipped: Vec<usize>,
    pub checked: usize,
}

/// Compare the reverse-mode gradient of `f` against central finite
/// differences at `point`, coordinate by coordinate.
///
/// Non-smooth coordinates are detected by comparing the forward and backward
/// one-sided slopes and reported as skipped rather than failed.
pub fn gradient_check(
    f: &dyn DiffFn,
    point: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, NumericsError> {
    let (_, grad) = f.value_and_grad(point)?;
    let mut report = GradCheckReport {
        passed: true,
        worst_coord: 0,
        worst_rel_err: 0.0,
        skipped: Vec::new(),
        checked: 0,
    };
    let mut probe = point.to_vec();
    let base = f.value(point)?;
    for i in 0..point.len() {
        let h = step * point[i].abs().max(1.0);
        probe[i] = point[i] + h;
        let fp = f.value(&probe)?;
        probe[i] = point[i] - h;
        let fm = f.value(&probe)?;
        probe[i] = point[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericsError::NonFinite { op: "gradient_check probe" });
        }
        let fwd = (fp - base) / h;
        let bwd = (base - fm) / h;
        let scale = fwd.abs().max(bwd.abs()).max(1.0);
        // A smooth function has fwd - bwd = O(h * f''); a kink inside the
        // probe interval makes the two slopes disagree at O(1).
        if (fwd - bwd).abs() > 1e3 * scale * h.max(tolerance) {
            report.skipped.push(i);
            continue;
        }
        let central = (fp - fm) / (2.0 * h);
        let denom = central.abs().max(grad[i].abs()).max(1e-8);
        let rel = (central - grad[i]).abs() / denom;
        report.checked += 1;
        if rel > report.worst_rel_err {
            report.worst_rel_err = rel;
            report.worst_coord = i;
        }
    }
    report.passed = report.worst_rel_err < tolerance;
    Ok(report)
}
