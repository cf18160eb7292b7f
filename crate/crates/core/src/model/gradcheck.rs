use rand::seq::index::sample;
use rand::Rng;

use super::forward::{accumulate, FlowDraw, LossScales};
use super::{ModelError, ModelParams};
use crate::rwr::WeightedExample;

/// Gradients below this magnitude are compared absolutely rather than
/// relatively.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index where the worst error occurred.
    pub worst_index: usize,
    pub checked: usize,
}

fn loss_at(params: &ModelParams, ex: &WeightedExample, draw: &FlowDraw) -> Result<f64, ModelError> {
    let scales = LossScales::per_example(ex, params.config().image_dim);
    Ok(accumulate(params, ex, draw, scales, None, None)?.total())
}

/// Central finite differences on `count` random parameters against the
/// supplied gradient.
pub fn grad_check_against<R: Rng + ?Sized>(
    params: &ModelParams,
    ex: &WeightedExample,
    draw: &FlowDraw,
    analytic: &[f64],
    epsilon: f64,
    count: usize,
    rng: &mut R,
) -> Result<GradCheckReport, ModelError> {
    let mut probe = params.clone();
    let count = count.min(params.len());
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, checked: count };
    for i in sample(rng, params.len(), count) {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + epsilon;
        let up = loss_at(&probe, ex, draw)?;
        probe.as_mut_slice()[i] = orig - epsilon;
        let down = loss_at(&probe, ex, draw)?;
        probe.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(REL_FLOOR);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Checks the analytic gradient of [`super::forward_loss`].
pub fn grad_check<R: Rng + ?Sized>(
    params: &ModelParams,
    ex: &WeightedExample,
    draw: &FlowDraw,
    epsilon: f64,
    count: usize,
    rng: &mut R,
) -> Result<GradCheckReport, ModelError> {
    let (_, grad) = super::forward_loss(params, ex, draw)?;
    grad_check_against(params, ex, draw, &grad, epsilon, count, rng)
}
