//! Central finite-difference verification of analytic gradients.

use super::Real;

/// Something with parameters and a scalar loss on a fixed batch.
pub trait Objective<T: Real> {
    fn loss(&self) -> T;

    /// Loss and analytic gradient, one dense vector per tensor.
    fn gradient(&self) -> (T, Vec<Vec<T>>);

    fn tensor_names(&self) -> Vec<String>;

    fn param_mut(&mut self, tensor: usize, index: usize) -> &mut T;

    /// Changes whenever the loss crosses a non-differentiable point (rectifier
    /// boundary). Finite differences across such a point are not meaningful.
    fn region_signature(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared on an absolute scale.
    pub abs_floor: f64,
    /// Check at most this many evenly strided coordinates per tensor.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a rectifier boundary.
    pub skipped_kinks: usize,
    pub worst: Option<Coordinate>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst_relative_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |c| c.relative_error)
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst_relative_error() <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coordinates checked, {} skipped at kinks, worst relative error {:.3e}",
            self.checked,
            self.skipped_kinks,
            self.worst_relative_error()
        )?;
        if let Some(c) = &self.worst {
            write!(
                f,
                " at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                c.tensor, c.index, c.analytic, c.numeric
            )?;
        }
        write!(f, ": {}", if self.passed() { "pass" } else { "FAIL" })
    }
}

/// Compares the objective's own analytic gradient against central differences.
pub fn grad_check<T: Real, O: Objective<T>>(obj: &mut O, options: &GradCheckOptions) -> GradCheckReport {
    let (_, analytic) = obj.gradient();
    grad_check_against(obj, &analytic, options)
}

/// Compares a supplied gradient against central differences.
pub fn grad_check_against<T: Real, O: Objective<T>>(
    obj: &mut O,
    analytic: &[Vec<T>],
    options: &GradCheckOptions,
) -> GradCheckReport {
    let names = obj.tensor_names();
    let base_region = obj.region_signature();
    let step: T = super::real(options.step);
    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        worst: None,
        tolerance: options.tolerance,
    };
    for (t, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let stride = match options.max_per_tensor {
            Some(k) if k > 0 && len > k => len.div_ceil(k),
            _ => 1,
        };
        for i in (0..len).step_by(stride) {
            let original = *obj.param_mut(t, i);
            *obj.param_mut(t, i) = original + step;
            let up = obj.loss();
            let up_region = obj.region_signature();
            *obj.param_mut(t, i) = original - step;
            let down = obj.loss();
            let down_region = obj.region_signature();
            *obj.param_mut(t, i) = original;
            if up_region != base_region || down_region != base_region {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = ((up - down) / (step + step)).to_f64().unwrap_or(f64::NAN);
            let a = grad[i].to_f64().unwrap_or(f64::NAN);
            let denom = a.abs().max(numeric.abs()).max(options.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            if report.worst.as_ref().is_none_or(|w| rel > w.relative_error) {
                report.worst = Some(Coordinate {
                    tensor: names[t].clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    relative_error: rel,
                });
            }
        }
    }
    report
}
