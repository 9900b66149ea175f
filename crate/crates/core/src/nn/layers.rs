use super::matrix::{axpy, vec_mat_acc, Matrix};
use super::{sigmoid, ShapeError};

/// Fully connected layer: `y = x·W + b`, `W` is `inputs × outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayerParams {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self, ShapeError> {
        if bias.len() != weights.cols() {
            return Err(ShapeError::new(
                "dense bias",
                format!("{} values", weights.cols()),
                format!("{} values", bias.len()),
            ));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weights.cols()
    }
}

/// `X·W + b` applied row-wise.
pub fn affine(x: &Matrix, params: &DenseLayerParams) -> Result<Matrix, ShapeError> {
    if x.cols() != params.weights.rows() {
        return Err(ShapeError::new(
            "affine",
            format!("input with {} columns (W is {}x{})", params.weights.rows(), params.weights.rows(), params.weights.cols()),
            format!("input {}x{}", x.rows(), x.cols()),
        ));
    }
    let mut out = x.matmul(&params.weights)?;
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(&params.bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Gate blocks inside the concatenated `4K` LSTM parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Modulation = 3,
}

/// Column-block order of every LSTM weight matrix and bias vector.
pub const GATE_ORDER: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Modulation];

/// LSTM layer parameters. Columns are laid out as four `K`-wide blocks in
/// [`GATE_ORDER`]: input, forget, output, modulation.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    /// `K_prev × 4K`
    pub input_weights: Matrix,
    /// `K × 4K`
    pub recurrent_weights: Matrix,
    /// `4K`
    pub bias: Vec<f64>,
}

impl LstmLayerParams {
    pub fn new(
        input_weights: Matrix,
        recurrent_weights: Matrix,
        bias: Vec<f64>,
    ) -> Result<Self, ShapeError> {
        let k = recurrent_weights.rows();
        if recurrent_weights.cols() != 4 * k {
            return Err(ShapeError::new(
                "lstm recurrent weights",
                format!("{k}x{}", 4 * k),
                format!("{}x{}", recurrent_weights.rows(), recurrent_weights.cols()),
            ));
        }
        if input_weights.cols() != 4 * k {
            return Err(ShapeError::new(
                "lstm input weights",
                format!("{} columns", 4 * k),
                format!("{} columns", input_weights.cols()),
            ));
        }
        if bias.len() != 4 * k {
            return Err(ShapeError::new(
                "lstm gate bias",
                format!("{} values", 4 * k),
                format!("{} values", bias.len()),
            ));
        }
        Ok(Self {
            input_weights,
            recurrent_weights,
            bias,
        })
    }

    pub fn zeros(inputs: usize, units: usize) -> Self {
        Self {
            input_weights: Matrix::zeros(inputs, 4 * units),
            recurrent_weights: Matrix::zeros(units, 4 * units),
            bias: vec![0.0; 4 * units],
        }
    }

    pub fn input_width(&self) -> usize {
        self.input_weights.rows()
    }

    pub fn units(&self) -> usize {
        self.recurrent_weights.rows()
    }

    /// Mutable view of one gate's bias block.
    pub fn gate_bias_mut(&mut self, gate: Gate) -> &mut [f64] {
        let k = self.units();
        let start = gate as usize * k;
        &mut self.bias[start..start + k]
    }
}

/// Cell memory and hidden output of one LSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmState {
    pub fn zeros(units: usize) -> Self {
        Self {
            c: vec![0.0; units],
            h: vec![0.0; units],
        }
    }

    pub fn units(&self) -> usize {
        self.h.len()
    }
}

/// Activated gate values from one step, kept for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmGates {
    pub input: Vec<f64>,
    pub forget: Vec<f64>,
    pub output: Vec<f64>,
    pub modulation: Vec<f64>,
}

/// One LSTM time step. Returns the new hidden output and the new state
/// (whose `h` equals the returned output).
pub fn lstm_step(
    x: &[f64],
    state: &LstmState,
    params: &LstmLayerParams,
) -> Result<(Vec<f64>, LstmState), ShapeError> {
    let (h, state, _) = lstm_step_with_gates(x, state, params)?;
    Ok((h, state))
}

pub fn lstm_step_with_gates(
    x: &[f64],
    state: &LstmState,
    params: &LstmLayerParams,
) -> Result<(Vec<f64>, LstmState, LstmGates), ShapeError> {
    let k = params.units();
    if x.len() != params.input_width() {
        return Err(ShapeError::new(
            "lstm_step input",
            format!("{} values", params.input_width()),
            format!("{} values", x.len()),
        ));
    }
    if state.c.len() != k || state.h.len() != k {
        return Err(ShapeError::new(
            "lstm_step state",
            format!("{k} units"),
            format!("c={}, h={}", state.c.len(), state.h.len()),
        ));
    }
    let mut z = params.bias.clone();
    vec_mat_acc(x, &params.input_weights, &mut z);
    vec_mat_acc(&state.h, &params.recurrent_weights, &mut z);
    let mut gates = activate_gates(&z, k);
    let (c, h) = cell_update(&gates, &state.c);
    // activate_gates returns a flat buffer; split it for the caller
    let modulation = gates.split_off(3 * k);
    let output = gates.split_off(2 * k);
    let forget = gates.split_off(k);
    let input = gates;
    Ok((
        h.clone(),
        LstmState { c, h },
        LstmGates {
            input,
            forget,
            output,
            modulation,
        },
    ))
}

/// Sigmoid on the i/f/o blocks, tanh on the modulation block.
pub(crate) fn activate_gates(z: &[f64], k: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(4 * k);
    g.extend(z[..3 * k].iter().map(|&v| sigmoid(v)));
    g.extend(z[3 * k..].iter().map(|v| v.tanh()));
    g
}

/// `c = f⊙c_prev + i⊙m`, `h = o⊙tanh(c)`.
pub(crate) fn cell_update(gates: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = c_prev.len();
    let mut c = Vec::with_capacity(k);
    let mut h = Vec::with_capacity(k);
    for j in 0..k {
        let (i, f, o, m) = (gates[j], gates[k + j], gates[2 * k + j], gates[3 * k + j]);
        let cj = f * c_prev[j] + i * m;
        c.push(cj);
        h.push(o * cj.tanh());
    }
    (c, h)
}

/// Forward activations of an LSTM layer over a whole sequence.
#[derive(Debug, Clone)]
pub(crate) struct LstmTrace {
    pub initial: LstmState,
    /// `T × 4K` activated gates
    pub gates: Matrix,
    /// `T × K` cell states
    pub cells: Matrix,
    /// `T × K` hidden outputs
    pub hidden: Matrix,
}

impl LstmTrace {
    pub fn final_state(&self) -> LstmState {
        let t = self.hidden.rows();
        if t == 0 {
            return self.initial.clone();
        }
        LstmState {
            c: self.cells.row(t - 1).to_vec(),
            h: self.hidden.row(t - 1).to_vec(),
        }
    }
}

pub(crate) fn lstm_forward_sequence(
    x: &Matrix,
    initial: &LstmState,
    params: &LstmLayerParams,
) -> Result<LstmTrace, ShapeError> {
    let k = params.units();
    if initial.units() != k {
        return Err(ShapeError::new(
            "lstm initial state",
            format!("{k} units"),
            format!("{} units", initial.units()),
        ));
    }
    // input contribution for every step at once
    if x.cols() != params.input_width() {
        return Err(ShapeError::new(
            "lstm input",
            format!("{} columns", params.input_width()),
            format!("{} columns", x.cols()),
        ));
    }
    let mut pre = x.matmul(&params.input_weights)?;
    for t in 0..pre.rows() {
        axpy(1.0, &params.bias, pre.row_mut(t));
    }
    let steps = x.rows();
    let mut gates = Matrix::zeros(steps, 4 * k);
    let mut cells = Matrix::zeros(steps, k);
    let mut hidden = Matrix::zeros(steps, k);
    let mut c_prev = initial.c.clone();
    let mut h_prev = initial.h.clone();
    for t in 0..steps {
        let mut z = pre.row(t).to_vec();
        vec_mat_acc(&h_prev, &params.recurrent_weights, &mut z);
        let g = activate_gates(&z, k);
        let (c, h) = cell_update(&g, &c_prev);
        gates.row_mut(t).copy_from_slice(&g);
        cells.row_mut(t).copy_from_slice(&c);
        hidden.row_mut(t).copy_from_slice(&h);
        c_prev = c;
        h_prev = h;
    }
    Ok(LstmTrace {
        initial: initial.clone(),
        gates,
        cells,
        hidden,
    })
}

/// Backpropagation through time for one LSTM layer. `d_hidden` is the loss
/// gradient w.r.t. each step's output coming from the layer above. The
/// initial state is treated as a constant. Returns `(dX, grads)`.
pub(crate) fn lstm_backward_sequence(
    x: &Matrix,
    trace: &LstmTrace,
    params: &LstmLayerParams,
    d_hidden: &Matrix,
) -> Result<(Matrix, LstmLayerParams), ShapeError> {
    let k = params.units();
    let steps = x.rows();
    let mut dz = Matrix::zeros(steps, 4 * k);
    let mut dh_next = vec![0.0; k];
    let mut dc_next = vec![0.0; k];
    for t in (0..steps).rev() {
        let g = trace.gates.row(t);
        let c = trace.cells.row(t);
        let c_prev: &[f64] = if t == 0 { &trace.initial.c } else { trace.cells.row(t - 1) };
        let dh_out = d_hidden.row(t);
        let dzt = dz.row_mut(t);
        for j in 0..k {
            let (i, f, o, m) = (g[j], g[k + j], g[2 * k + j], g[3 * k + j]);
            let tc = c[j].tanh();
            let dh = dh_out[j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            let d_i = dc * m;
            let d_f = dc * c_prev[j];
            let d_m = dc * i;
            dc_next[j] = dc * f;
            dzt[j] = d_i * i * (1.0 - i);
            dzt[k + j] = d_f * f * (1.0 - f);
            dzt[2 * k + j] = d_o * o * (1.0 - o);
            dzt[3 * k + j] = d_m * (1.0 - m * m);
        }
        for (r, dh) in dh_next.iter_mut().enumerate() {
            *dh = super::matrix::dot(dz.row(t), params.recurrent_weights.row(r));
        }
    }
    // previous hidden outputs, h_{t-1} for each t
    let mut h_prev = Matrix::zeros(steps, k);
    for t in 0..steps {
        let src: &[f64] = if t == 0 { &trace.initial.h } else { trace.hidden.row(t - 1) };
        h_prev.row_mut(t).copy_from_slice(src);
    }
    let d_input_weights = x.transpose_matmul(&dz)?;
    let d_recurrent_weights = h_prev.transpose_matmul(&dz)?;
    let mut d_bias = vec![0.0; 4 * k];
    for t in 0..steps {
        axpy(1.0, dz.row(t), &mut d_bias);
    }
    let dx = dz.matmul_transpose(&params.input_weights)?;
    Ok((
        dx,
        LstmLayerParams {
            input_weights: d_input_weights,
            recurrent_weights: d_recurrent_weights,
            bias: d_bias,
        },
    ))
}

pub(crate) fn dense_backward(
    x: &Matrix,
    params: &DenseLayerParams,
    d_out: &Matrix,
) -> Result<(Matrix, DenseLayerParams), ShapeError> {
    let d_weights = x.transpose_matmul(d_out)?;
    let mut d_bias = vec![0.0; params.output_width()];
    for t in 0..d_out.rows() {
        axpy(1.0, d_out.row(t), &mut d_bias);
    }
    let dx = d_out.matmul_transpose(&params.weights)?;
    Ok((
        dx,
        DenseLayerParams {
            weights: d_weights,
            bias: d_bias,
        },
    ))
}

/// One layer of the network stack.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Dense(DenseLayerParams),
    Lstm(LstmLayerParams),
}

impl LayerParams {
    pub fn input_width(&self) -> usize {
        match self {
            LayerParams::Dense(d) => d.input_width(),
            LayerParams::Lstm(l) => l.input_width(),
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            LayerParams::Dense(d) => d.output_width(),
            LayerParams::Lstm(l) => l.units(),
        }
    }

    pub fn is_lstm(&self) -> bool {
        matches!(self, LayerParams::Lstm(_))
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            LayerParams::Dense(d) => {
                LayerParams::Dense(DenseLayerParams::zeros(d.input_width(), d.output_width()))
            }
            LayerParams::Lstm(l) => LayerParams::Lstm(LstmLayerParams::zeros(l.input_width(), l.units())),
        }
    }
}
