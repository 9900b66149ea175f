use super::layers::{
    affine, dense_backward, lstm_backward_sequence, lstm_forward_sequence, LayerParams, LstmState,
    LstmTrace,
};
use super::loss::{loss, softmax_rows, LossValue};
use super::matrix::Matrix;
use super::{NnError, ShapeError};

/// Whether a parameter block is a weight matrix (ℓ2-penalised) or a bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Weights,
    Bias,
}

#[derive(Debug, Clone, Copy)]
pub struct ParamBlock<'a> {
    pub layer: usize,
    pub kind: BlockKind,
    pub values: &'a [f64],
}

/// Block order for one layer. Dense: weights, bias. LSTM: input weights,
/// recurrent weights, bias. This order is also the checkpoint order.
fn layer_blocks<'a>(layer: usize, params: &'a LayerParams, out: &mut Vec<ParamBlock<'a>>) {
    match params {
        LayerParams::Dense(d) => {
            out.push(ParamBlock { layer, kind: BlockKind::Weights, values: d.weights.as_slice() });
            out.push(ParamBlock { layer, kind: BlockKind::Bias, values: &d.bias });
        }
        LayerParams::Lstm(l) => {
            out.push(ParamBlock { layer, kind: BlockKind::Weights, values: l.input_weights.as_slice() });
            out.push(ParamBlock { layer, kind: BlockKind::Weights, values: l.recurrent_weights.as_slice() });
            out.push(ParamBlock { layer, kind: BlockKind::Bias, values: &l.bias });
        }
    }
}

fn layer_blocks_mut<'a>(params: &'a mut LayerParams, out: &mut Vec<&'a mut [f64]>) {
    match params {
        LayerParams::Dense(d) => {
            out.push(d.weights.as_mut_slice());
            out.push(&mut d.bias);
        }
        LayerParams::Lstm(l) => {
            out.push(l.input_weights.as_mut_slice());
            out.push(l.recurrent_weights.as_mut_slice());
            out.push(&mut l.bias);
        }
    }
}

/// A stack of dense and LSTM layers mapping `input_width` features to
/// `output_width` logits at every time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerParams>,
}

/// Per-parameter gradients, shaped exactly like the network they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            layer_blocks(i, l, &mut out);
        }
        out
    }

    /// Flattened gradient in block order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|b| b.values.iter().copied()).collect()
    }
}

/// Cached activations of one forward pass over a sequence.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `inputs[i]` is the input to layer `i`; the last entry is the logits.
    activations: Vec<Matrix>,
    traces: Vec<Option<LstmTrace>>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Matrix {
        self.activations.last().expect("forward pass has at least the input")
    }

    /// Activation table entering layer `i` (0 = raw input), or the logits for
    /// `i == layer count`.
    pub fn activation(&self, i: usize) -> Option<&Matrix> {
        self.activations.get(i)
    }

    /// LSTM states after the last step, one per LSTM layer in stack order.
    pub fn final_states(&self) -> Vec<LstmState> {
        self.traces.iter().flatten().map(|t| t.final_state()).collect()
    }
}

/// Loss, gradients and carried-over LSTM states for one sequence.
#[derive(Debug, Clone)]
pub struct SequenceGradients {
    pub loss: LossValue,
    pub gradients: Gradients,
    pub final_states: Vec<LstmState>,
    pub probabilities: Matrix,
}

impl Network {
    pub fn new(layers: Vec<LayerParams>) -> Result<Self, ShapeError> {
        if layers.is_empty() {
            return Err(ShapeError::new("network", "at least one layer", "none"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(ShapeError::new(
                    format!("layers {i} -> {}", i + 1),
                    format!("input width {}", pair[0].output_width()),
                    format!("input width {}", pair[1].input_width()),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    pub fn lstm_units(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerParams::Lstm(p) => Some(p.units()),
                LayerParams::Dense(_) => None,
            })
            .collect()
    }

    pub fn zero_states(&self) -> Vec<LstmState> {
        self.lstm_units().into_iter().map(LstmState::zeros).collect()
    }

    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            layer_blocks(i, l, &mut out);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            layer_blocks_mut(l, &mut out);
        }
        out
    }

    /// Weight matrices only (the ℓ2-penalised blocks).
    pub fn weight_blocks(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.blocks()
            .into_iter()
            .filter(|b| b.kind == BlockKind::Weights)
            .map(|b| b.values)
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.values.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.values.iter().all(|v| v.is_finite()))
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    fn check_states(&self, states: &[LstmState]) -> Result<(), NnError> {
        let units = self.lstm_units();
        if states.len() != units.len() {
            return Err(NnError::StateCount {
                expected: units.len(),
                actual: states.len(),
            });
        }
        Ok(())
    }

    /// Runs the whole stack over a `T × input_width` sequence starting from
    /// `initial` LSTM states (one per LSTM layer).
    pub fn forward(&self, inputs: &Matrix, initial: &[LstmState]) -> Result<ForwardPass, NnError> {
        self.check_states(initial)?;
        if inputs.cols() != self.input_width() {
            return Err(ShapeError::new(
                "network input",
                format!("{} features", self.input_width()),
                format!("{} features", inputs.cols()),
            )
            .into());
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut traces = Vec::with_capacity(self.layers.len());
        activations.push(inputs.clone());
        let mut states = initial.iter();
        for layer in &self.layers {
            let x = activations.last().expect("non-empty");
            let (y, trace) = match layer {
                LayerParams::Dense(d) => (affine(x, d)?, None),
                LayerParams::Lstm(l) => {
                    let init = states.next().expect("state count checked");
                    let trace = lstm_forward_sequence(x, init, l)?;
                    (trace.hidden.clone(), Some(trace))
                }
            };
            activations.push(y);
            traces.push(trace);
        }
        Ok(ForwardPass { activations, traces })
    }

    /// Exact gradients of mean per-step cross-entropy plus `λ·Σw²` over the
    /// sequence, by backpropagation through time. Gradients do not flow into
    /// `initial`, so consecutive calls implement truncated BPTT.
    pub fn gradients(
        &self,
        inputs: &Matrix,
        targets: &[usize],
        lambda: f64,
        initial: &[LstmState],
    ) -> Result<SequenceGradients, NnError> {
        if inputs.rows() == 0 {
            return Err(NnError::EmptyBatch);
        }
        let pass = self.forward(inputs, initial)?;
        let probs = softmax_rows(pass.logits());
        let loss_value = loss(&probs, targets, self.weight_blocks(), lambda)?;

        // d(mean CE)/d logits = (p - onehot) / T
        let steps = targets.len() as f64;
        let mut delta = probs.clone();
        for (t, &class) in targets.iter().enumerate() {
            let row = delta.row_mut(t);
            row[class] -= 1.0;
            row.iter_mut().for_each(|v| *v /= steps);
        }

        let mut grads: Vec<LayerParams> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &pass.activations[i];
            let (dx, g) = match layer {
                LayerParams::Dense(d) => {
                    let (dx, g) = dense_backward(x, d, &delta)?;
                    (dx, LayerParams::Dense(g))
                }
                LayerParams::Lstm(l) => {
                    let trace = pass.traces[i].as_ref().expect("lstm layer has a trace");
                    let (dx, g) = lstm_backward_sequence(x, trace, l, &delta)?;
                    (dx, LayerParams::Lstm(g))
                }
            };
            grads.push(g);
            delta = dx;
        }
        grads.reverse();
        let mut gradients = Gradients { layers: grads };

        if lambda != 0.0 {
            let params = self.blocks();
            let mut grad_blocks: Vec<&mut [f64]> = Vec::new();
            for l in &mut gradients.layers {
                layer_blocks_mut(l, &mut grad_blocks);
            }
            for (p, g) in params.iter().zip(grad_blocks) {
                if p.kind == BlockKind::Weights {
                    for (gi, wi) in g.iter_mut().zip(p.values) {
                        *gi += 2.0 * lambda * wi;
                    }
                }
            }
        }

        Ok(SequenceGradients {
            loss: loss_value,
            gradients,
            final_states: pass.final_states(),
            probabilities: probs,
        })
    }

    /// Objective value only; used by the finite-difference checker.
    pub fn loss(
        &self,
        inputs: &Matrix,
        targets: &[usize],
        lambda: f64,
        initial: &[LstmState],
    ) -> Result<LossValue, NnError> {
        if inputs.rows() == 0 {
            return Err(NnError::EmptyBatch);
        }
        let pass = self.forward(inputs, initial)?;
        let probs = softmax_rows(pass.logits());
        loss(&probs, targets, self.weight_blocks(), lambda)
    }
}
