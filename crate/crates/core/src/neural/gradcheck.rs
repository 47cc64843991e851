//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::Trainable;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor so near-zero gradients compare absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-4, abs_floor: 1e-7 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter tensor, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

/// Compares every entry of `analytic` (gradients laid out like `model`)
/// with `(L(p + eps) - L(p - eps)) / (2 eps)`.
pub fn grad_check<M, F>(model: &M, analytic: &M, loss: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    M: Trainable + Clone,
    F: Fn(&M) -> f64,
{
    let grads: Vec<Vec<f64>> = analytic.params().iter().map(|t| t.data().to_vec()).collect();
    let mut probe = model.clone();
    let mut report = GradCheckReport { checked: 0, failures: 0, max_rel_error: 0.0, max_abs_error: 0.0, worst: None, passed: true };
    for (p, g) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = probe.params()[p].data()[i];
            probe.params_mut()[p].data_mut()[i] = orig + cfg.epsilon;
            let up = loss(&probe);
            probe.params_mut()[p].data_mut()[i] = orig - cfg.epsilon;
            let down = loss(&probe);
            probe.params_mut()[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.epsilon);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if !(rel <= cfg.tolerance) {
                report.failures += 1;
            }
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((p, i));
            }
            report.max_abs_error = report.max_abs_error.max(abs);
        }
    }
    report.passed = report.failures == 0;
    report
}
