use super::tensor::Tensor;

/// Per-parameter agreement between analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Maximum relative error for each parameter tensor.
    pub max_rel_error: Vec<f64>,
    pub coordinates_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `loss_and_grad` against central differences with step `h`.
///
/// `stride` > 1 checks every `stride`-th coordinate of each parameter, which
/// keeps large networks affordable. The closure must be deterministic.
pub fn grad_check<F>(loss_and_grad: F, params: &[Tensor<f64>], h: f64, stride: usize, tolerance: f64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>),
{
    let (_, analytic) = loss_and_grad(params);
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    let mut checked = 0;
    for p in 0..params.len() {
        let mut worst = 0.0f64;
        for j in (0..params[p].len()).step_by(stride.max(1)) {
            let orig = work[p].data()[j];
            work[p].data_mut()[j] = orig + h;
            let (up, _) = loss_and_grad(&work);
            work[p].data_mut()[j] = orig - h;
            let (down, _) = loss_and_grad(&work);
            work[p].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[p].data()[j], numeric));
            checked += 1;
        }
        max_rel_error.push(worst);
    }
    GradCheckReport { max_rel_error, coordinates_checked: checked, tolerance }
}
