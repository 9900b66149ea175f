use super::matrix::Matrix;
use super::{NnError, ShapeError};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
    }
    out
}

/// Value of the training objective, split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Mean cross-entropy over samples.
    pub data: f64,
    /// `λ · Σ w²` over weight matrices.
    pub penalty: f64,
    /// How many target probabilities hit [`PROB_FLOOR`].
    pub clamped: usize,
}

impl LossValue {
    pub fn total(&self) -> f64 {
        self.data + self.penalty
    }
}

/// Mean cross-entropy of `probs` against class indices `targets`, plus
/// `lambda` times the summed squares of every slice in `weights`.
pub fn loss<'a>(
    probs: &Matrix,
    targets: &[usize],
    weights: impl IntoIterator<Item = &'a [f64]>,
    lambda: f64,
) -> Result<LossValue, NnError> {
    if probs.rows() != targets.len() {
        return Err(ShapeError::new(
            "loss targets",
            format!("{} labels", probs.rows()),
            format!("{} labels", targets.len()),
        )
        .into());
    }
    if targets.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut clamped = 0;
    let mut sum = 0.0;
    for (t, &class) in targets.iter().enumerate() {
        if class >= probs.cols() {
            return Err(NnError::BadTarget {
                index: class,
                classes: probs.cols(),
            });
        }
        let mut p = probs.get(t, class);
        if p < PROB_FLOOR {
            p = PROB_FLOOR;
            clamped += 1;
        }
        sum -= p.ln();
    }
    if clamped > 0 {
        log::warn!("{clamped} target probabilities clamped to {PROB_FLOOR:e}");
    }
    let penalty = lambda * weights.into_iter().flatten().map(|w| w * w).sum::<f64>();
    Ok(LossValue {
        data: sum / targets.len() as f64,
        penalty,
        clamped,
    })
}
