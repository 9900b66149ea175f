//! The intent classifier: an `I`-layer stack whose last two hidden layers
//! are LSTMs, with 64 inputs and 5 output logits per time step.
//!
//! For `I = 7` the layers are
//! `input(64) → dense(K) → dense(K) → dense(K) → LSTM(K) → LSTM(K) → output(5)`.
//! Dense hidden layers are purely affine. The whole batch is one time
//! sequence and every step is classified.

mod checkpoint;
mod train;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{IntentLabel, LabeledSample, CHANNELS, CLASSES};
use crate::nn::{
    softmax_rows, DenseLayerParams, Gate, LayerParams, LstmLayerParams, Matrix, Network, NnError,
    SequenceGradients, ShapeError,
};

pub use checkpoint::{load, save, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{evaluate, train, EpochRecord, Evaluation, TrainError, TrainOutcome, TrainingSchedule};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameters: {0}")]
    HyperParams(String),
    #[error("topology: {0}")]
    Topology(String),
    #[error("layer index {index} outside 1..={layers}")]
    LayerIndex { index: usize, layers: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// The five tuned factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// ℓ2 coefficient λ.
    pub lambda: f64,
    /// Adam learning rate.
    pub lr: f64,
    /// Width `K` shared by every hidden layer.
    pub width: usize,
    /// Total layer count `I`, input and output included.
    pub layers: usize,
    /// Number of training batches per subject.
    pub n_b: usize,
}

impl HyperParams {
    /// The best levels found by the orthogonal-array experiment.
    pub const TUNED: HyperParams = HyperParams {
        lambda: 0.004,
        lr: 0.005,
        width: 64,
        layers: 7,
        n_b: 3,
    };

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(ModelError::HyperParams(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ModelError::HyperParams(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.width == 0 {
            return Err(ModelError::HyperParams("width must be positive".into()));
        }
        if self.n_b == 0 {
            return Err(ModelError::HyperParams("n_b must be at least 1".into()));
        }
        if self.layers < 4 {
            return Err(ModelError::Topology(format!(
                "{} layers requested; at least 4 (input, two LSTM, output) are needed",
                self.layers
            )));
        }
        Ok(())
    }

    /// From factor values in the order λ, lr, K, I, n_b.
    pub fn from_factor_values(values: &[f64]) -> Result<Self, ModelError> {
        let [lambda, lr, width, layers, n_b] = values else {
            return Err(ModelError::HyperParams(format!("expected 5 factor values, got {}", values.len())));
        };
        let as_count = |v: f64, name: &str| -> Result<usize, ModelError> {
            if v.fract() == 0.0 && v >= 0.0 {
                Ok(v as usize)
            } else {
                Err(ModelError::HyperParams(format!("{name} must be a whole number, got {v}")))
            }
        };
        let hp = Self {
            lambda: *lambda,
            lr: *lr,
            width: as_count(*width, "width")?,
            layers: as_count(*layers, "layers")?,
            n_b: as_count(*n_b, "n_b")?,
        };
        hp.validate()?;
        Ok(hp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Input,
    Dense,
    Lstm,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
}

/// Layer plan for `hp`: the two layers before the output are LSTMs, any
/// earlier hidden layers are dense.
pub fn topology(hp: &HyperParams) -> Result<Vec<LayerSpec>, ModelError> {
    hp.validate()?;
    let mut layers = vec![LayerSpec { kind: LayerKind::Input, width: CHANNELS }];
    let hidden = hp.layers - 2;
    for i in 0..hidden {
        let kind = if i + 2 >= hidden { LayerKind::Lstm } else { LayerKind::Dense };
        layers.push(LayerSpec { kind, width: hp.width });
    }
    layers.push(LayerSpec { kind: LayerKind::Output, width: CLASSES });
    Ok(layers)
}

/// Weight initialisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    /// Initial bias of every LSTM forget gate.
    pub forget_bias: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { forget_bias: 1.0 }
    }
}

/// Glorot-uniform matrix in ±√(6/(fan_in+fan_out)).
fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (rows + fan_out) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| (2.0 * rng.random::<f64>() - 1.0) * limit)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

/// A network plus everything needed to rebuild or audit it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: HyperParams,
    pub seed: u64,
    pub network: Network,
    pub meta: TrainingMeta,
}

/// Builds and initialises the model for `hp` from `seed`.
pub fn build(hp: &HyperParams, seed: u64) -> Result<ModelParams, ModelError> {
    build_with(hp, seed, &InitConfig::default())
}

pub fn build_with(hp: &HyperParams, seed: u64, init: &InitConfig) -> Result<ModelParams, ModelError> {
    let plan = topology(hp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(plan.len() - 1);
    for pair in plan.windows(2) {
        let (inp, out) = (pair[0].width, pair[1].width);
        let layer = match pair[1].kind {
            LayerKind::Lstm => {
                let w_in = glorot(&mut rng, inp, 4 * out, 4 * out);
                let w_rec = glorot(&mut rng, out, 4 * out, 4 * out);
                let mut p = LstmLayerParams::new(w_in, w_rec, vec![0.0; 4 * out])?;
                p.gate_bias_mut(Gate::Forget).fill(init.forget_bias);
                LayerParams::Lstm(p)
            }
            LayerKind::Dense | LayerKind::Output => {
                LayerParams::Dense(DenseLayerParams::new(glorot(&mut rng, inp, out, out), vec![0.0; out])?)
            }
            LayerKind::Input => unreachable!("input appears only first"),
        };
        layers.push(layer);
    }
    let model = ModelParams {
        hyper: *hp,
        seed,
        network: Network::new(layers)?,
        meta: TrainingMeta::default(),
    };
    model.check()?;
    Ok(model)
}

/// Per-sample prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: IntentLabel,
    /// Softmax probabilities, index 0 is label 1.
    pub scores: [f64; CLASSES],
}

pub(crate) fn features_matrix(samples: &[LabeledSample]) -> Matrix {
    Matrix::from_fn(samples.len(), CHANNELS, |r, c| samples[r].features[c])
}

pub(crate) fn targets(samples: &[LabeledSample]) -> Vec<usize> {
    samples.iter().map(|s| s.label.index()).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl ModelParams {
    /// Verifies the structural invariants of a classifier.
    pub fn check(&self) -> Result<(), ModelError> {
        let plan = topology(&self.hyper)?;
        let layers = self.network.layers();
        if layers.len() + 1 != plan.len() {
            return Err(ModelError::Topology(format!(
                "{} parameter layers for a {}-layer plan",
                layers.len(),
                plan.len()
            )));
        }
        for (i, (layer, spec)) in layers.iter().zip(&plan[1..]).enumerate() {
            let kind_ok = match spec.kind {
                LayerKind::Lstm => layer.is_lstm(),
                _ => !layer.is_lstm(),
            };
            if !kind_ok || layer.output_width() != spec.width {
                return Err(ModelError::Topology(format!(
                    "layer {} should be {:?}({}), found {}({})",
                    i + 2,
                    spec.kind,
                    spec.width,
                    if layer.is_lstm() { "lstm" } else { "dense" },
                    layer.output_width()
                )));
            }
        }
        if self.network.input_width() != CHANNELS {
            return Err(ModelError::Topology(format!("input width {}", self.network.input_width())));
        }
        Ok(())
    }

    pub fn topology(&self) -> Vec<LayerSpec> {
        topology(&self.hyper).expect("validated at construction")
    }

    pub fn layer_count(&self) -> usize {
        self.network.layers().len() + 1
    }

    /// Loss gradients over `batch` treated as one sequence from zero state.
    pub fn gradients(&self, batch: &[LabeledSample], lambda: f64) -> Result<SequenceGradients, ModelError> {
        if batch.is_empty() {
            return Err(NnError::EmptyBatch.into());
        }
        let x = features_matrix(batch);
        Ok(self.network.gradients(&x, &targets(batch), lambda, &self.network.zero_states())?)
    }

    /// Runs the sequence from zero LSTM state and classifies every step.
    pub fn predict(&self, samples: &[LabeledSample]) -> Result<Vec<Prediction>, ModelError> {
        self.predict_features(&features_matrix(samples))
    }

    /// Like [`predict`](Self::predict) on a raw `T × 64` feature matrix.
    pub fn predict_features(&self, features: &Matrix) -> Result<Vec<Prediction>, ModelError> {
        if features.rows() == 0 {
            return Ok(Vec::new());
        }
        let pass = self.network.forward(features, &self.network.zero_states())?;
        let probs = softmax_rows(pass.logits());
        (0..probs.rows())
            .map(|t| {
                let row = probs.row(t);
                let mut scores = [0.0; CLASSES];
                scores.copy_from_slice(row);
                Ok(Prediction {
                    label: IntentLabel::from_index(argmax(row)).expect("5 outputs"),
                    scores,
                })
            })
            .collect::<Result<_, crate::dataset::DatasetError>>()
            .map_err(|e| ModelError::Topology(e.to_string()))
    }

    /// Activations of layer `layer` (1-based; 1 is the raw input, the last
    /// layer yields the output logits) for every sample of the sequence.
    pub fn activations(&self, samples: &[LabeledSample], layer: usize) -> Result<Matrix, ModelError> {
        let layers = self.layer_count();
        if layer == 0 || layer > layers {
            return Err(ModelError::LayerIndex { index: layer, layers });
        }
        let x = features_matrix(samples);
        if samples.is_empty() || layer == 1 {
            let width = self.topology()[layer - 1].width;
            return Ok(if samples.is_empty() { Matrix::zeros(0, width) } else { x });
        }
        let pass = self.network.forward(&x, &self.network.zero_states())?;
        Ok(pass.activation(layer - 1).expect("index checked").clone())
    }

    /// Writes `index,label,a1,…,aK` rows for layer `layer`.
    pub fn export_activations<W: Write>(
        &self,
        samples: &[LabeledSample],
        layer: usize,
        out: W,
    ) -> Result<(), ModelError> {
        let acts = self.activations(samples, layer)?;
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = ["index".to_string(), "label".to_string()]
            .into_iter()
            .chain((1..=acts.cols()).map(|i| format!("a{i}")))
            .collect();
        w.write_record(&header)?;
        for (i, s) in samples.iter().enumerate() {
            let row: Vec<String> = [i.to_string(), s.label.to_string()]
                .into_iter()
                .chain(acts.row(i).iter().map(|v| v.to_string()))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
