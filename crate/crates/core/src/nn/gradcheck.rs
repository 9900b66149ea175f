//! Central finite-difference check of [`Network::gradients`].

use super::layers::LstmState;
use super::matrix::Matrix;
use super::network::Network;
use super::NnError;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms; below it the finite-difference round-off (about `ε·|L|/h`)
/// dominates the quotient.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub parameters: usize,
    pub max_relative_error: f64,
    /// `(block, element)` of the worst entry.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares analytic gradients with `(L(θ+h) − L(θ−h)) / 2h` for every
/// parameter of `net`.
pub fn check_gradients(
    net: &Network,
    inputs: &Matrix,
    targets: &[usize],
    lambda: f64,
    initial: &[LstmState],
    step: f64,
) -> Result<GradCheckReport, NnError> {
    let analytic = net.gradients(inputs, targets, lambda, initial)?.gradients;
    let analytic_blocks = analytic.blocks();
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        parameters: 0,
        max_relative_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (b, block) in analytic_blocks.iter().enumerate() {
        for i in 0..block.values.len() {
            let original = probe.blocks()[b].values[i];
            probe.blocks_mut()[b][i] = original + step;
            let plus = probe.loss(inputs, targets, lambda, initial)?.total();
            probe.blocks_mut()[b][i] = original - step;
            let minus = probe.loss(inputs, targets, lambda, initial)?.total();
            probe.blocks_mut()[b][i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = block.values[i];
            let err = relative_error(a, numeric);
            report.parameters += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (b, i);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
