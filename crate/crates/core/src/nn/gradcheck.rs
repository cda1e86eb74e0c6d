//! Central finite-difference check of analytic parameter gradients.

use crate::params::{Gradients, ModelParams};

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub worst_relative_error: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` against `(loss(p + h) - loss(p - h)) / 2h` for every
/// trainable coordinate, visiting at most `max_per_tensor` evenly spaced
/// coordinates of each tensor.
pub fn check<F>(
    params: &ModelParams,
    analytic: &Gradients,
    mut loss: F,
    step: f64,
    tolerance: f64,
    max_per_tensor: usize,
) -> GradCheckReport
where
    F: FnMut(&ModelParams) -> f64,
{
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (gname, group) in params.groups() {
        if !group.trainable {
            continue;
        }
        for (tname, tensor) in &group.tensors {
            let n = tensor.len();
            let stride = (n / max_per_tensor.max(1)).max(1);
            let grad = analytic.get(gname, tname);
            for idx in (0..n).step_by(stride) {
                let original = tensor.as_slice().expect("standard layout")[idx];
                let set = |p: &mut ModelParams, v: f64| {
                    p.group_mut(gname).expect("group").tensors[tname.as_str()]
                        .as_slice_mut()
                        .expect("standard layout")[idx] = v;
                };
                set(&mut probe, original + step);
                let up = loss(&probe);
                set(&mut probe, original - step);
                let down = loss(&probe);
                set(&mut probe, original);
                let numeric = (up - down) / (2.0 * step);
                let a = grad.map_or(0.0, |g| g.as_slice().expect("standard layout")[idx]);
                let err = relative_error(a, numeric);
                report.checked += 1;
                if err <= tolerance {
                    report.passed += 1;
                }
                report.worst_relative_error = report.worst_relative_error.max(err);
            }
        }
    }
    report
}
