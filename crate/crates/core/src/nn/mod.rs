//! Numerical primitives for the recurrent classifier: dense and LSTM layers,
//! softmax cross-entropy with an ℓ2 weight penalty, Adam, hand-derived
//! backpropagation through time and a central-difference gradient checker.
//!
//! Everything here runs in `f64`. The network is a plain stack of
//! [`LayerParams`]; it knows nothing about EEG or class labels beyond the
//! width of its last layer.

mod adam;
pub mod gradcheck;
mod layers;
mod loss;
mod matrix;
mod network;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamMoments};
pub use layers::{
    affine, lstm_step, lstm_step_with_gates, DenseLayerParams, Gate, LayerParams, LstmGates,
    LstmLayerParams, LstmState, GATE_ORDER,
};
pub use loss::{loss, softmax, softmax_rows, LossValue, PROB_FLOOR};
pub use matrix::Matrix;
pub use network::{BlockKind, ForwardPass, Gradients, Network, ParamBlock, SequenceGradients};

/// Dimension mismatch between two operands.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("shape mismatch in {context}: expected {expected}, got {actual}")]
pub struct ShapeError {
    pub context: String,
    pub expected: String,
    pub actual: String,
}

impl ShapeError {
    pub fn new(
        context: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Self {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn mismatch(context: &str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Self::new(
            context,
            format!("operands compatible with {}x{}", lhs.0, lhs.1),
            format!("{}x{}", rhs.0, rhs.1),
        )
    }
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("empty batch: at least one time step is required")]
    EmptyBatch,
    #[error("class index {index} out of range for {classes} output classes")]
    BadTarget { index: usize, classes: usize },
    #[error("non-finite gradient in parameter block {block} at element {element}; update rejected")]
    NonFiniteGradient { block: usize, element: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("expected {expected} initial LSTM states, got {actual}")]
    StateCount { expected: usize, actual: usize },
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
