//! Central finite-difference audit of the backpropagated gradient.

use serde::{Deserialize, Serialize};

use super::{loss_and_grad, one_hot, softmax_cross_entropy, to_internal, LabeledExample, NetworkParams, Tape};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Relative error with an absolute floor so coordinates that are zero in both
/// routes do not divide by zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Floor used by [`check_gradients`] for coordinates whose gradient is ~0.
pub const GRADCHECK_FLOOR: f64 = 1e-7;

fn loss_only(params: &NetworkParams, ex: &LabeledExample) -> Result<f64> {
    let target = one_hot(params.arch().classes(), ex.y)?;
    let tape = Tape::record(params, to_internal(params.arch(), &ex.x)?);
    Ok(softmax_cross_entropy(tape.output(), &target).0)
}

/// Compares every gradient coordinate with `(L(t + h_i) - L(t - h_i)) / 2 h_i`,
/// `h_i = h * max(1, |t_i|)`.
pub fn check_gradients(params: &NetworkParams, ex: &LabeledExample, h: f64) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(params, ex)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        params: params.len(),
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for i in 0..params.len() {
        let orig = params.as_slice()[i];
        let step = h * orig.abs().max(1.0);
        probe.as_mut_slice()[i] = orig + step;
        let plus = loss_only(&probe, ex)?;
        probe.as_mut_slice()[i] = orig - step;
        let minus = loss_only(&probe, ex)?;
        probe.as_mut_slice()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric, GRADCHECK_FLOOR);
        if err > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic_at_worst: analytic[i],
                numeric_at_worst: numeric,
                ..report
            };
        }
    }
    Ok(report)
}
