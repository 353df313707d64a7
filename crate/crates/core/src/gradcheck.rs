//! Central finite-difference oracle for analytic gradients.
//!
//! Only forward losses are evaluated here, so the check stays independent of
//! the backpropagation code it validates.

use crate::nn::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// `(index, finite difference, analytic)` for every coordinate outside tolerance.
    pub failures: Vec<(usize, f64, f64)>,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `analytic` with `(L(p + h e_i) - L(p - h e_i)) / 2h` for every
/// coordinate, accepting `|fd - analytic| <= atol + rtol |fd|`.
///
/// Returns `None` when some probe changes the ReLU activation pattern: the
/// loss is not differentiable across the probe and the point must be redrawn.
pub fn check_gradients(
    params: &ParamSet,
    analytic: &ParamSet,
    loss: impl Fn(&ParamSet) -> f64,
    pattern: impl Fn(&ParamSet) -> Vec<bool>,
    step: f64,
    rtol: f64,
    atol: f64,
) -> Option<GradCheckReport> {
    let base = pattern(params);
    let grads = analytic.flat();
    let mut report = GradCheckReport {
        checked: 0,
        failures: Vec::new(),
        max_abs_err: 0.0,
    };
    let mut probe = params.clone();
    for (i, &g) in grads.iter().enumerate() {
        let original = *probe.scalar_mut(i);
        *probe.scalar_mut(i) = original + step;
        if pattern(&probe) != base {
            return None;
        }
        let plus = loss(&probe);
        *probe.scalar_mut(i) = original - step;
        if pattern(&probe) != base {
            return None;
        }
        let minus = loss(&probe);
        *probe.scalar_mut(i) = original;

        let fd = (plus - minus) / (2.0 * step);
        let err = (fd - g).abs();
        report.max_abs_err = report.max_abs_err.max(err);
        if err > atol + rtol * fd.abs() {
            report.failures.push((i, fd, g));
        }
        report.checked += 1;
    }
    Some(report)
}
