//! Shared helpers for finite-difference gradient checking.

/// Central-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;

/// Dual-tolerance comparison: relative error at most 1e-4 when the gradient
/// is appreciable, absolute error at most 1e-7 when both values are tiny.
pub fn gradient_matches(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-3 {
        (analytic - numeric).abs() <= 1e-7
    } else {
        (analytic - numeric).abs() / scale <= 1e-4
    }
}

/// Worst-case error report for a batch of comparisons.
#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
}

impl GradReport {
    pub fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale >= 1e-3 {
            self.worst_rel = self.worst_rel.max(abs / scale);
        } else {
            self.worst_abs = self.worst_abs.max(abs);
        }
        if !gradient_matches(analytic, numeric) {
            self.failures += 1;
        }
    }

    pub fn assert_clean(&self, context: &str) {
        assert_eq!(
            self.failures, 0,
            "{context}: {} of {} gradients out of tolerance (worst rel {:.3e}, worst abs {:.3e})",
            self.failures, self.checked, self.worst_rel, self.worst_abs
        );
    }
}

/// Central finite difference of a scalar function at one coordinate.
pub fn central_difference(mut eval: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (eval(x + FD_STEP) - eval(x - FD_STEP)) / (2.0 * FD_STEP)
}
