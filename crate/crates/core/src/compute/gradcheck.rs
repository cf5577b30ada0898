use super::params::ParamStore;
use super::tape::Gradients;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Compare an analytic gradient with the fourth-order central difference
/// `(8[L(θ+h) − L(θ−h)] − [L(θ+2h) − L(θ−2h)]) / 12h` on every coordinate of
/// every parameter.
///
/// `loss_and_grad` must be deterministic in the parameters.
pub fn grad_check<F>(
    params: &ParamStore,
    loss_and_grad: F,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "step h={h} must be positive"
        )));
    }
    let (loss, grads) = loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let loss_only = |p: &ParamStore| -> Result<f64> {
        let (l, _) = loss_and_grad(p)?;
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::NonFinite("perturbed loss".into()))
        }
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
        tolerance,
    };
    for id in params.ids() {
        let cols = params.get(id).cols();
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[i] = orig + offset;
                loss_only(&work)
            };
            let (up, down) = (at(h)?, at(-h)?);
            let (up2, down2) = (at(2.0 * h)?, at(-2.0 * h)?);
            work.get_mut(id).data_mut()[i] = orig;

            let fd = (8.0 * (up - down) - (up2 - down2)) / (12.0 * h);
            let analytic = grads.value_at(id, i / cols, i % cols, cols);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            let rel = (analytic - fd).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((params.param(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
