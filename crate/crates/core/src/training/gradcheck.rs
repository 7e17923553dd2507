//! Central-difference gradient checking.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::layer::GiblyLayer;
use crate::neighborhood::{NeighborhoodIndex, PointCloud};

/// Comparison settings. An entry passes when its relative error is below
/// `tolerance`, or when both gradients are smaller than `small_magnitude`
/// and their absolute difference is below `abs_tolerance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub small_magnitude: f64,
    pub abs_tolerance: f64,
}

impl GradcheckOptions {
    /// Pure relative check with no absolute fallback.
    pub fn relative(step: f64, tolerance: f64) -> Self {
        GradcheckOptions {
            step,
            tolerance,
            small_magnitude: 0.0,
            abs_tolerance: 0.0,
        }
    }

    pub fn with_abs_fallback(mut self, small_magnitude: f64, abs_tolerance: f64) -> Self {
        self.small_magnitude = small_magnitude;
        self.abs_tolerance = abs_tolerance;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub options: GradcheckOptions,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    /// Entry with the largest relative error among the failing ones, or overall.
    pub fn worst(&self) -> Option<&GradcheckEntry> {
        let pool: Vec<&GradcheckEntry> = if self.passed() {
            self.entries.iter().collect()
        } else {
            self.entries.iter().filter(|e| !e.passed).collect()
        };
        pool.into_iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradcheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

/// `|a − f| / max(|a|, |f|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `loss_fn` at `params` against
/// central differences of its value, perturbing every entry in turn.
pub fn gradcheck<F>(loss_fn: F, params: &[f64], options: GradcheckOptions) -> GradcheckReport
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    gradcheck_values(|v| loss_fn(v).0, params, &analytic, options)
}

/// Checks every layer parameter on the scalar loss `Σ upstream ⊙ output`
/// plus the composite regularizer.
pub fn check_layer(
    layer: &GiblyLayer,
    cloud: &PointCloud,
    upstream: &Array2<f64>,
    options: GradcheckOptions,
) -> Result<GradcheckReport> {
    if upstream.dim() != (cloud.len(), layer.output_dim()) {
        return Err(Error::ShapeMismatch(format!(
            "upstream is {:?}, output is {:?}",
            upstream.dim(),
            (cloud.len(), layer.output_dim())
        )));
    }
    let index = NeighborhoodIndex::new(cloud.coords(), layer.config().schedule.max_radius())?;
    let pass = layer.forward(cloud, &index)?;
    let analytic = layer.backward(cloud, &index, &pass, upstream.view())?.to_vec();
    let params = layer.params_to_vec();
    let mut probe = layer.clone();
    let loss = |v: &[f64]| {
        probe.set_params_from_slice(v).expect("length checked");
        let out = probe.forward(cloud, &index).expect("validated above").output;
        (out * upstream).sum() + probe.regularizer_value()
    };
    Ok(gradcheck_values(loss, &params, &analytic, options))
}

/// Like [`gradcheck`] with the analytic gradient supplied up front and a
/// value-only (possibly stateful) loss.
pub fn gradcheck_values<F>(mut loss: F, params: &[f64], analytic: &[f64], options: GradcheckOptions) -> GradcheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), params.len(), "gradient length must match parameter count");
    let mut probe = params.to_vec();
    let h = options.step;
    let mut entries = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let plus = loss(&probe);
        probe[i] = params[i] - h;
        let minus = loss(&probe);
        probe[i] = params[i];
        entries.push(entry(i, analytic[i], (plus - minus) / (2.0 * h), &options));
    }
    GradcheckReport { entries, options }
}

fn entry(index: usize, analytic: f64, numeric: f64, options: &GradcheckOptions) -> GradcheckEntry {
    let rel_error = relative_error(analytic, numeric);
    let small = analytic.abs().max(numeric.abs()) < options.small_magnitude;
    let passed = rel_error < options.tolerance || (small && (analytic - numeric).abs() < options.abs_tolerance);
    GradcheckEntry {
        index,
        analytic,
        numeric,
        rel_error,
        passed,
    }
}
