//! Single-layer recurrent network trained with plain minibatch SGD.
//!
//! ```text
//! h_t = act(W_rec h_{t-1} + W_in x_t + b_h)
//! y_t = out_act(W_out h_t + b_y)
//! ```
//!
//! Inputs are one-hot symbols during training, so the input projection is a
//! column gather. The loss is `½‖y − one_hot(target)‖²`, averaged over
//! examples, taken at the last step by default. Gradients come from a
//! hand-written backward pass through time over length-sorted batches, which
//! lets a single minibatch mix sequence lengths without padding.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dfa::Symbol;
use crate::seeding::{self, Stream};
use crate::taskgen::{Dataset, Example};

#[derive(Debug, Error)]
pub enum RnnError {
    #[error("non-finite value at timestep {timestep}")]
    NonFinite { timestep: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("input dimension {found} does not match model input {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("{0} is not a valid hidden activation")]
    HiddenActivation(Activation),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    StepRelu,
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::StepRelu => "step_relu",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "step_relu" => Ok(Activation::StepRelu),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// `0` for `x <= 0`, `x + 1` for `x > 0`.
#[inline]
pub fn step_relu(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        0.0
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::StepRelu => step_relu(x),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a = f(z)`.
    /// Kinks and the step are given derivative 0 at `z <= 0`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu | Activation::StepRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnModel {
    /// hidden × input
    pub w_in: Array2<f64>,
    /// hidden × hidden
    pub w_rec: Array2<f64>,
    pub b_h: Array1<f64>,
    /// output × hidden
    pub w_out: Array2<f64>,
    pub b_y: Array1<f64>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

/// Gradient with the same block layout as [`RnnModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_in: Array2<f64>,
    pub w_rec: Array2<f64>,
    pub b_h: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_y: Array1<f64>,
}

impl Gradients {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            w_in: Array2::zeros((dims.hidden, dims.input)),
            w_rec: Array2::zeros((dims.hidden, dims.hidden)),
            b_h: Array1::zeros(dims.hidden),
            w_out: Array2::zeros((dims.output, dims.hidden)),
            b_y: Array1::zeros(dims.output),
        }
    }

    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            self.w_in.as_slice().unwrap(),
            self.w_rec.as_slice().unwrap(),
            self.b_h.as_slice().unwrap(),
            self.w_out.as_slice().unwrap(),
            self.b_y.as_slice().unwrap(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scale(&mut self, c: f64) {
        self.w_in *= c;
        self.w_rec *= c;
        self.b_h *= c;
        self.w_out *= c;
        self.b_y *= c;
    }

    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        self.w_in.scaled_add(c, &other.w_in);
        self.w_rec.scaled_add(c, &other.w_rec);
        self.b_h.scaled_add(c, &other.b_h);
        self.w_out.scaled_add(c, &other.w_out);
        self.b_y.scaled_add(c, &other.b_y);
    }
}

/// Per-step hidden states and outputs of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrajectory {
    pub hidden: Vec<Array1<f64>>,
    pub outputs: Vec<Array1<f64>>,
}

impl HiddenTrajectory {
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }
}

/// Where the loss is applied along each sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Only the output after the last symbol.
    #[default]
    FinalStep,
    /// Every prefix output, averaged per sequence.
    EveryStep,
}

/// How minibatches are formed from the shuffled epoch order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Chunks drawn within each length, so every batch is rectangular.
    #[default]
    ByLength,
    /// Consecutive chunks of the shuffled order; lengths mix freely.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_gain: f64,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    pub loss_mode: LossMode,
    pub batching: Batching,
    pub hidden_size: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            batch_size: 128,
            epochs: 1000,
            init_gain: 0.1,
            seed: 0,
            shuffle_each_epoch: true,
            loss_mode: LossMode::FinalStep,
            batching: Batching::ByLength,
            hidden_size: 100,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Relu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RnnError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RnnError::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(RnnError::Config("batch_size must be >= 1".into()));
        }
        if !(self.init_gain >= 0.0 && self.init_gain.is_finite()) {
            return Err(RnnError::Config("init_gain must be finite and >= 0".into()));
        }
        if self.hidden_size == 0 {
            return Err(RnnError::Config("hidden_size must be >= 1".into()));
        }
        if self.hidden_activation == Activation::StepRelu {
            return Err(RnnError::HiddenActivation(self.hidden_activation));
        }
        Ok(())
    }
}

fn xavier_uniform<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    gain: f64,
    rng: &mut R,
) -> Array2<f64> {
    // fan_in = cols, fan_out = rows
    let a = gain * (6.0 / (rows + cols) as f64).sqrt();
    if a == 0.0 {
        return Array2::zeros((rows, cols));
    }
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..=a))
}

impl RnnModel {
    pub fn zeros(dims: Dims, hidden_activation: Activation, output_activation: Activation) -> Self {
        Self {
            w_in: Array2::zeros((dims.hidden, dims.input)),
            w_rec: Array2::zeros((dims.hidden, dims.hidden)),
            b_h: Array1::zeros(dims.hidden),
            w_out: Array2::zeros((dims.output, dims.hidden)),
            b_y: Array1::zeros(dims.output),
            hidden_activation,
            output_activation,
        }
    }

    /// Glorot-uniform weights scaled by `gain`, zero biases. Matrices are
    /// drawn in the order `w_in`, `w_rec`, `w_out`.
    pub fn init_xavier<R: Rng + ?Sized>(
        dims: Dims,
        gain: f64,
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Self {
        let w_in = xavier_uniform(dims.hidden, dims.input, gain, rng);
        let w_rec = xavier_uniform(dims.hidden, dims.hidden, gain, rng);
        let w_out = xavier_uniform(dims.output, dims.hidden, gain, rng);
        Self {
            w_in,
            w_rec,
            b_h: Array1::zeros(dims.hidden),
            w_out,
            b_y: Array1::zeros(dims.output),
            hidden_activation,
            output_activation,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            input: self.w_in.ncols(),
            hidden: self.w_rec.nrows(),
            output: self.w_out.nrows(),
        }
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w_in.as_slice_mut().unwrap(),
            self.w_rec.as_slice_mut().unwrap(),
            self.b_h.as_slice_mut().unwrap(),
            self.w_out.as_slice_mut().unwrap(),
            self.b_y.as_slice_mut().unwrap(),
        ]
    }

    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            self.w_in.as_slice().unwrap(),
            self.w_rec.as_slice().unwrap(),
            self.b_h.as_slice().unwrap(),
            self.w_out.as_slice().unwrap(),
            self.b_y.as_slice().unwrap(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Recurrent map `f_h(h, x)`.
    pub fn step(&self, h: ArrayView1<f64>, x: ArrayView1<f64>) -> Array1<f64> {
        let mut z = self.w_rec.dot(&h);
        z += &self.w_in.dot(&x);
        z += &self.b_h;
        z.mapv_inplace(|v| self.hidden_activation.apply(v));
        z
    }

    /// Recurrent map on a one-hot symbol.
    pub fn step_symbol(&self, h: ArrayView1<f64>, symbol: Symbol) -> Array1<f64> {
        let mut z = self.w_rec.dot(&h);
        z += &self.w_in.column(symbol);
        z += &self.b_h;
        z.mapv_inplace(|v| self.hidden_activation.apply(v));
        z
    }

    /// Output map `f_y(h)`.
    pub fn readout(&self, h: ArrayView1<f64>) -> Array1<f64> {
        let mut y = self.w_out.dot(&h);
        y += &self.b_y;
        y.mapv_inplace(|v| self.output_activation.apply(v));
        y
    }

    pub fn initial_hidden(&self) -> Array1<f64> {
        Array1::zeros(self.w_rec.nrows())
    }

    /// Runs the network over encoded inputs starting from `h0`.
    pub fn forward(
        &self,
        inputs: &[Array1<f64>],
        h0: ArrayView1<f64>,
    ) -> Result<HiddenTrajectory, RnnError> {
        let mut h = h0.to_owned();
        let mut traj = HiddenTrajectory {
            hidden: Vec::with_capacity(inputs.len()),
            outputs: Vec::with_capacity(inputs.len()),
        };
        for (t, x) in inputs.iter().enumerate() {
            if x.len() != self.w_in.ncols() {
                return Err(RnnError::InputDim {
                    expected: self.w_in.ncols(),
                    found: x.len(),
                });
            }
            h = self.step(h.view(), x.view());
            let y = self.readout(h.view());
            if !h.iter().chain(y.iter()).all(|v| v.is_finite()) {
                return Err(RnnError::NonFinite { timestep: t });
            }
            traj.hidden.push(h.clone());
            traj.outputs.push(y);
        }
        Ok(traj)
    }

    /// [`forward`](Self::forward) on a symbol sequence from the zero state.
    pub fn forward_symbols(&self, sequence: &[Symbol]) -> Result<HiddenTrajectory, RnnError> {
        let dim = self.w_in.ncols();
        let inputs: Vec<Array1<f64>> = sequence
            .iter()
            .map(|&s| {
                let mut v = Array1::zeros(dim);
                v[s] = 1.0;
                v
            })
            .collect();
        self.forward(&inputs, self.initial_hidden().view())
    }

    /// Final hidden state after `sequence` from the zero state.
    pub fn final_hidden(&self, sequence: &[Symbol]) -> Array1<f64> {
        sequence
            .iter()
            .fold(self.initial_hidden(), |h, &s| self.step_symbol(h.view(), s))
    }

    /// Predicted output symbol (argmax of the readout) after `sequence`.
    pub fn predict(&self, sequence: &[Symbol]) -> usize {
        argmax(self.readout(self.final_hidden(sequence).view()).view())
    }

    pub fn apply_gradients(&mut self, g: &Gradients, learning_rate: f64) {
        self.w_in.scaled_add(-learning_rate, &g.w_in);
        self.w_rec.scaled_add(-learning_rate, &g.w_rec);
        self.b_h.scaled_add(-learning_rate, &g.b_h);
        self.w_out.scaled_add(-learning_rate, &g.w_out);
        self.b_y.scaled_add(-learning_rate, &g.b_y);
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Forward activations for a batch sorted by decreasing length.
struct BatchTape {
    /// Example index (into the caller's slice) of each row.
    order: Vec<usize>,
    lens: Vec<usize>,
    /// `active[t]` = number of rows with length > t.
    active: Vec<usize>,
    pre: Vec<Array2<f64>>,
    hidden: Vec<Array2<f64>>,
}

fn run_batch(model: &RnnModel, examples: &[&Example]) -> BatchTape {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    // stable, so equal lengths keep their batch order
    order.sort_by(|&a, &b| examples[b].sequence.len().cmp(&examples[a].sequence.len()));
    let lens: Vec<usize> = order.iter().map(|&i| examples[i].sequence.len()).collect();
    let steps = lens.first().copied().unwrap_or(0);
    let active: Vec<usize> = (0..steps)
        .map(|t| lens.iter().take_while(|&&l| l > t).count())
        .collect();

    let hidden_size = model.w_rec.nrows();
    let mut pre = Vec::with_capacity(steps);
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(steps);
    for t in 0..steps {
        let k = active[t];
        let mut z = Array2::<f64>::zeros((k, hidden_size));
        if t > 0 {
            let h_prev = hidden[t - 1].slice(s![..k, ..]);
            general_mat_mul(1.0, &h_prev, &model.w_rec.t(), 0.0, &mut z);
        }
        for (r, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            let symbol = examples[order[r]].sequence[t];
            row += &model.w_in.column(symbol);
            row += &model.b_h;
        }
        let act = model.hidden_activation;
        let h = z.mapv(|v| act.apply(v));
        pre.push(z);
        hidden.push(h);
    }
    BatchTape {
        order,
        lens,
        active,
        pre,
        hidden,
    }
}

/// Mean loss and its exact gradient over `examples`.
pub fn batch_loss_grad(
    model: &RnnModel,
    examples: &[&Example],
    mode: LossMode,
    want_grad: bool,
) -> Result<(f64, Option<Gradients>), RnnError> {
    if examples.is_empty() {
        return Err(RnnError::EmptyBatch);
    }
    let tape = run_batch(model, examples);
    let dims = model.dims();
    let n = examples.len() as f64;
    let steps = tape.active.len();
    let out_act = model.output_activation;

    let mut grads = want_grad.then(|| Gradients::zeros(dims));
    let mut dh = Array2::<f64>::zeros((tape.order.len(), dims.hidden));
    let mut loss = 0.0;

    for t in (0..steps).rev() {
        let k = tape.active[t];
        // rows that emit an output at step t
        let (lo, weight_of): (usize, Box<dyn Fn(usize) -> f64>) = match mode {
            LossMode::FinalStep => {
                let next = tape.active.get(t + 1).copied().unwrap_or(0);
                (next, Box::new(|_| 1.0 / n))
            }
            LossMode::EveryStep => {
                let lens = &tape.lens;
                (0, Box::new(move |r| 1.0 / (n * lens[r] as f64)))
            }
        };
        if lo < k {
            let h_rows = tape.hidden[t].slice(s![lo..k, ..]);
            let mut zy = Array2::<f64>::zeros((k - lo, dims.output));
            general_mat_mul(1.0, &h_rows, &model.w_out.t(), 0.0, &mut zy);
            zy += &model.b_y;
            let mut dy = Array2::<f64>::zeros(zy.raw_dim());
            for (i, (zrow, mut drow)) in zy.outer_iter().zip(dy.outer_iter_mut()).enumerate() {
                let r = lo + i;
                let ex = examples[tape.order[r]];
                let target = match mode {
                    LossMode::FinalStep => ex.target,
                    LossMode::EveryStep => ex.step_targets[t],
                };
                let w = weight_of(r);
                for (o, (&z, d)) in zrow.iter().zip(drow.iter_mut()).enumerate() {
                    let y = out_act.apply(z);
                    let resid = y - if o == target { 1.0 } else { 0.0 };
                    loss += 0.5 * w * resid * resid;
                    *d = w * resid * out_act.derivative(z, y);
                }
            }
            if let Some(g) = grads.as_mut() {
                general_mat_mul(1.0, &dy.t(), &h_rows, 1.0, &mut g.w_out);
                g.b_y += &dy.sum_axis(Axis(0));
                let mut dh_rows = dh.slice_mut(s![lo..k, ..]);
                general_mat_mul(1.0, &dy, &model.w_out, 1.0, &mut dh_rows);
            }
        }

        let Some(g) = grads.as_mut() else { continue };
        // back through the recurrent step
        let hid_act = model.hidden_activation;
        let mut dz = dh.slice(s![..k, ..]).to_owned();
        Zip::from(&mut dz)
            .and(&tape.pre[t])
            .and(&tape.hidden[t])
            .for_each(|d, &z, &a| *d *= hid_act.derivative(z, a));
        g.b_h += &dz.sum_axis(Axis(0));
        for (r, row) in dz.outer_iter().enumerate() {
            let symbol = examples[tape.order[r]].sequence[t];
            let mut col = g.w_in.column_mut(symbol);
            col += &row;
        }
        if t > 0 {
            let h_prev = tape.hidden[t - 1].slice(s![..k, ..]);
            general_mat_mul(1.0, &dz.t(), &h_prev, 1.0, &mut g.w_rec);
            let mut dh_rows = dh.slice_mut(s![..k, ..]);
            general_mat_mul(1.0, &dz, &model.w_rec, 0.0, &mut dh_rows);
        }
    }

    if !loss.is_finite() {
        return Err(RnnError::NonFinite { timestep: steps });
    }
    if let Some(g) = &grads {
        if !g.is_finite() {
            return Err(RnnError::NonFiniteGradient);
        }
    }
    Ok((loss, grads))
}

/// Mean of `½‖y_final − one_hot(target)‖²` over `batch`.
pub fn mse_loss(model: &RnnModel, batch: &[Example]) -> f64 {
    let refs: Vec<&Example> = batch.iter().collect();
    batch_loss_grad(model, &refs, LossMode::FinalStep, false)
        .map(|(l, _)| l)
        .unwrap_or(f64::NAN)
}

/// Exact gradient of [`mse_loss`] by backpropagation through time.
pub fn bptt_grad(model: &RnnModel, batch: &[Example]) -> Result<Gradients, RnnError> {
    let refs: Vec<&Example> = batch.iter().collect();
    batch_loss_grad(model, &refs, LossMode::FinalStep, true).map(|(_, g)| g.unwrap())
}

/// Loss over a whole dataset, evaluated in chunks.
pub fn dataset_loss(model: &RnnModel, data: &Dataset, mode: LossMode) -> Result<f64, RnnError> {
    const CHUNK: usize = 512;
    let refs: Vec<&Example> = data.examples.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(CHUNK) {
        let (l, _) = batch_loss_grad(model, chunk, mode, false)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / refs.len().max(1) as f64)
}

/// Mean final-step loss and argmax accuracy.
pub fn evaluate(model: &RnnModel, data: &Dataset) -> Result<(f64, f64), RnnError> {
    let loss = dataset_loss(model, data, LossMode::FinalStep)?;
    let correct = data
        .examples
        .iter()
        .filter(|e| model.predict(&e.sequence) == e.target)
        .count();
    Ok((loss, correct as f64 / data.len().max(1) as f64))
}

/// Read-only hook run before training (epoch 0) and after every epoch.
pub trait TrainObserver {
    fn on_epoch(&mut self, epoch: usize, model: &RnnModel, train_loss: f64) -> Result<(), RnnError>;
}

impl<F> TrainObserver for F
where
    F: FnMut(usize, &RnnModel, f64) -> Result<(), RnnError>,
{
    fn on_epoch(&mut self, epoch: usize, model: &RnnModel, train_loss: f64) -> Result<(), RnnError> {
        self(epoch, model, train_loss)
    }
}

/// Observer that does nothing.
pub struct NoObserver;

impl TrainObserver for NoObserver {
    fn on_epoch(&mut self, _: usize, _: &RnnModel, _: f64) -> Result<(), RnnError> {
        Ok(())
    }
}

/// Per-epoch full-dataset training loss; entry 0 is before any update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap_or(&f64::NAN)
    }
}

fn epoch_batches<R: Rng + ?Sized>(
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    if config.shuffle_each_epoch {
        order.shuffle(rng);
    }
    match config.batching {
        Batching::Mixed => order.chunks(config.batch_size).map(<[usize]>::to_vec).collect(),
        Batching::ByLength => {
            let max_len = data.max_len();
            let mut by_len: Vec<Vec<usize>> = vec![Vec::new(); max_len + 1];
            for i in order {
                by_len[data.examples[i].sequence.len()].push(i);
            }
            let mut batches: Vec<Vec<usize>> = by_len
                .iter()
                .flat_map(|g| g.chunks(config.batch_size).map(<[usize]>::to_vec))
                .collect();
            if config.shuffle_each_epoch {
                batches.shuffle(rng);
            }
            batches
        }
    }
}

/// Builds the model for `config` from its init stream.
pub fn init_model(config: &TrainConfig, input: usize, output: usize) -> RnnModel {
    let dims = Dims {
        input,
        hidden: config.hidden_size,
        output,
    };
    let mut rng = seeding::rng(config.seed, Stream::Init);
    RnnModel::init_xavier(
        dims,
        config.init_gain,
        config.hidden_activation,
        config.output_activation,
        &mut rng,
    )
}

/// Plain minibatch SGD, `θ ← θ − lr·∇L` per batch, no momentum or decay.
pub fn train<O: TrainObserver + ?Sized>(
    model: &mut RnnModel,
    data: &Dataset,
    config: &TrainConfig,
    observer: &mut O,
) -> Result<TrainLog, RnnError> {
    config.validate()?;
    if data.is_empty() {
        return Err(RnnError::EmptyBatch);
    }
    let mut rng = seeding::rng(config.seed, Stream::Shuffle);
    let mut losses = Vec::with_capacity(config.epochs + 1);

    let initial = dataset_loss(model, data, config.loss_mode)?;
    losses.push(initial);
    observer.on_epoch(0, model, initial)?;

    for epoch in 1..=config.epochs {
        for batch in epoch_batches(data, config, &mut rng) {
            let refs: Vec<&Example> = batch.iter().map(|&i| &data.examples[i]).collect();
            let grads = match batch_loss_grad(model, &refs, config.loss_mode, true) {
                Ok((_, g)) => g.unwrap(),
                Err(_) => {
                    return Err(RnnError::Diverged {
                        epoch,
                        loss: f64::NAN,
                    })
                }
            };
            model.apply_gradients(&grads, config.learning_rate);
        }
        let loss = dataset_loss(model, data, config.loss_mode)
            .map_err(|_| RnnError::Diverged { epoch, loss: f64::NAN })?;
        if !loss.is_finite() {
            return Err(RnnError::Diverged { epoch, loss });
        }
        losses.push(loss);
        observer.on_epoch(epoch, model, loss)?;
    }
    Ok(TrainLog { losses })
}

/// Plain-text checkpoint. Values are written as hexadecimal bit patterns so
/// that a round trip is bit-exact.
pub fn write_checkpoint<W: Write>(model: &RnnModel, seed: u64, mut w: W) -> Result<(), RnnError> {
    let d = model.dims();
    let mut s = format!(
        "rnn-checkpoint v1\ninput {} hidden {} output {}\nhidden_activation {}\noutput_activation {}\nseed {}\n",
        d.input, d.hidden, d.output, model.hidden_activation, model.output_activation, seed
    );
    let names = ["w_in", "w_rec", "b_h", "w_out", "b_y"];
    for (name, block) in names.iter().zip(model.blocks()) {
        let _ = write!(s, "{name} {}", block.len());
        for v in block {
            let _ = write!(s, " {:016x}", v.to_bits());
        }
        s.push('\n');
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Inverse of [`write_checkpoint`]; returns the model and its recorded seed.
pub fn read_checkpoint<R: BufRead>(r: R) -> Result<(RnnModel, u64), RnnError> {
    let bad = |m: &str| RnnError::Checkpoint(m.to_string());
    let lines: Vec<String> = r.lines().collect::<Result<_, _>>()?;
    if lines.len() != 10 || lines[0] != "rnn-checkpoint v1" {
        return Err(bad("unrecognized header"));
    }
    let dim_tokens: Vec<&str> = lines[1].split_whitespace().collect();
    let num = |t: &str| t.parse::<usize>().map_err(|_| bad("bad dimension"));
    if dim_tokens.len() != 6 {
        return Err(bad("bad dimension line"));
    }
    let dims = Dims {
        input: num(dim_tokens[1])?,
        hidden: num(dim_tokens[3])?,
        output: num(dim_tokens[5])?,
    };
    let field = |line: &str, key: &str| -> Result<String, RnnError> {
        line.strip_prefix(key)
            .map(|v| v.trim().to_string())
            .ok_or_else(|| bad(&format!("expected `{key}`")))
    };
    let hidden_activation: Activation = field(&lines[2], "hidden_activation")?.parse().map_err(|e: String| bad(&e))?;
    let output_activation: Activation = field(&lines[3], "output_activation")?.parse().map_err(|e: String| bad(&e))?;
    let seed: u64 = field(&lines[4], "seed")?.parse().map_err(|_| bad("bad seed"))?;

    let mut model = RnnModel::zeros(dims, hidden_activation, output_activation);
    let names = ["w_in", "w_rec", "b_h", "w_out", "b_y"];
    for ((name, block), line) in names.iter().zip(model.blocks_mut()).zip(&lines[5..]) {
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some(*name) {
            return Err(bad(&format!("expected block `{name}`")));
        }
        let len = num(tokens.next().unwrap_or(""))?;
        if len != block.len() {
            return Err(bad(&format!("block `{name}` has wrong size")));
        }
        for v in block.iter_mut() {
            let tok = tokens.next().ok_or_else(|| bad("truncated block"))?;
            *v = f64::from_bits(u64::from_str_radix(tok, 16).map_err(|_| bad("bad value"))?);
        }
    }
    Ok((model, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfa::parity_dfa;
    use crate::taskgen::{all_sequences, make_dataset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> Dims {
        Dims {
            input: 2,
            hidden: 6,
            output: 2,
        }
    }

    #[test]
    fn step_relu_values() {
        assert_eq!(step_relu(-1.0), 0.0);
        assert_eq!(step_relu(0.5), 1.5);
        assert_eq!(step_relu(0.0), 0.0);
    }

    #[test]
    fn xavier_zero_gain_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = RnnModel::init_xavier(small_dims(), 0.0, Activation::Relu, Activation::Relu, &mut rng);
        assert!(m.blocks().iter().all(|b| b.iter().all(|&x| x == 0.0)));

        let a = RnnModel::init_xavier(small_dims(), 0.1, Activation::Relu, Activation::Relu, &mut ChaCha8Rng::seed_from_u64(4));
        let b = RnnModel::init_xavier(small_dims(), 0.1, Activation::Relu, Activation::Relu, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!(a.b_h.iter().all(|&x| x == 0.0) && a.b_y.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn xavier_moment_matches_uniform_law() {
        let dims = Dims {
            input: 2,
            hidden: 100,
            output: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = RnnModel::init_xavier(dims, 0.1, Activation::Relu, Activation::Relu, &mut rng);
        // uniform on [-a, a] has std a/sqrt(3) = gain*sqrt(2/(fan_in+fan_out))
        let std = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let expect_in = 0.1 * (2.0 / 102.0f64).sqrt();
        let expect_rec = 0.1 * (2.0 / 200.0f64).sqrt();
        assert!((std(m.w_in.as_slice().unwrap()) / expect_in - 1.0).abs() < 0.1);
        assert!((std(m.w_rec.as_slice().unwrap()) / expect_rec - 1.0).abs() < 0.1);
        assert!((std(m.w_out.as_slice().unwrap()) / expect_in - 1.0).abs() < 0.1);
    }

    #[test]
    fn forward_zero_weights() {
        let mut m = RnnModel::zeros(small_dims(), Activation::Tanh, Activation::Relu);
        m.b_y[0] = 0.3;
        m.b_y[1] = -0.2;
        let traj = m.forward_symbols(&[1, 0, 1]).unwrap();
        assert_eq!(traj.len(), 3);
        for (h, y) in traj.hidden.iter().zip(&traj.outputs) {
            assert!(h.iter().all(|&v| v == 0.0));
            assert_eq!(y.to_vec(), vec![0.3, 0.0]);
        }
    }

    #[test]
    fn forward_relu_nonnegative_and_dimension_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = RnnModel::init_xavier(small_dims(), 1.0, Activation::Relu, Activation::Relu, &mut rng);
        let traj = m.forward_symbols(&[0, 1, 1, 0, 1]).unwrap();
        assert!(traj.hidden.iter().all(|h| h.iter().all(|&v| v >= 0.0)));
        let bad = vec![Array1::zeros(3)];
        assert!(matches!(
            m.forward(&bad, m.initial_hidden().view()),
            Err(RnnError::InputDim { .. })
        ));
    }

    #[test]
    fn forward_reports_non_finite_timestep() {
        let mut m = RnnModel::zeros(small_dims(), Activation::Relu, Activation::Relu);
        m.w_in[[0, 1]] = f64::INFINITY;
        let err = m.forward_symbols(&[0, 0, 1]).unwrap_err();
        assert!(matches!(err, RnnError::NonFinite { timestep: 2 }));
    }

    #[test]
    fn mse_examples() {
        let data = make_dataset(&parity_dfa(), &all_sequences(2, 2)).unwrap();
        let mut m = RnnModel::zeros(small_dims(), Activation::Relu, Activation::Relu);
        // zero model predicts [0,0] against a one-hot target
        let ex = &data.examples[..1];
        assert!((mse_loss(&m, ex) - 0.5).abs() < 1e-15);
        let twice = vec![ex[0].clone(), ex[0].clone()];
        assert_eq!(mse_loss(&m, &twice), mse_loss(&m, ex));
        // perfect constant prediction for target 0
        m.b_y[0] = 1.0;
        assert_eq!(mse_loss(&m, ex), 0.0);
        let g = bptt_grad(&m, ex).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = RnnModel::init_xavier(small_dims(), 0.7, Activation::Tanh, Activation::StepRelu, &mut rng);
        let mut buf = Vec::new();
        write_checkpoint(&m, 42, &mut buf).unwrap();
        let (back, seed) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(back, m);
        assert!(read_checkpoint("nope\n".as_bytes()).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let data = make_dataset(&parity_dfa(), &all_sequences(2, 3)).unwrap();
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            hidden_size: 8,
            ..TrainConfig::default()
        };
        let mut m = init_model(&config, 2, 2);
        let before = m.clone();
        train(&mut m, &data, &config, &mut NoObserver).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            hidden_activation: Activation::StepRelu,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(RnnError::HiddenActivation(_))));
    }

    #[test]
    fn by_length_batches_are_rectangular() {
        let data = make_dataset(&parity_dfa(), &all_sequences(2, 6)).unwrap();
        let config = TrainConfig {
            batching: Batching::ByLength,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = epoch_batches(&data, &config, &mut rng);
        let mut seen = 0;
        for b in &batches {
            let l = data.examples[b[0]].sequence.len();
            assert!(b.iter().all(|&i| data.examples[i].sequence.len() == l));
            assert!(b.len() <= 16);
            seen += b.len();
        }
        assert_eq!(seen, data.len());
    }

    fn random_batch(rng: &mut ChaCha8Rng, count: usize, max_len: usize) -> Vec<Example> {
        let seqs: Vec<_> = (0..count)
            .map(|_| {
                let len = rng.gen_range(1..=max_len);
                crate::taskgen::SymbolSequence((0..len).map(|_| rng.gen_range(0..2)).collect())
            })
            .collect();
        let mut ds = make_dataset(&parity_dfa(), &seqs).unwrap();
        ds.examples.truncate(count);
        ds.examples
    }

    fn fd_check(model: &RnnModel, batch: &[Example]) -> f64 {
        let g = bptt_grad(model, batch).unwrap();
        let analytic: Vec<f64> = g.blocks().iter().flat_map(|b| b.iter().copied()).collect();
        let mut numeric = Vec::new();
        let eps = 1e-5;
        for block in 0..5 {
            for i in 0..model.blocks()[block].len() {
                let mut plus = model.clone();
                plus.blocks_mut()[block][i] += eps;
                let mut minus = model.clone();
                minus.blocks_mut()[block][i] -= eps;
                numeric.push((mse_loss(&plus, batch) - mse_loss(&minus, batch)) / (2.0 * eps));
            }
        }
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
        analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences_tanh() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let dims = Dims {
                input: 2,
                hidden: rng.gen_range(2..=8),
                output: 2,
            };
            let m = RnnModel::init_xavier(dims, 1.5, Activation::Tanh, Activation::Tanh, &mut rng);
            let batch = random_batch(&mut rng, 6, 5);
            let err = fd_check(&m, &batch);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dims = Dims {
            input: 2,
            hidden: 7,
            output: 2,
        };
        let mut m = RnnModel::init_xavier(dims, 1.0, Activation::Relu, Activation::Relu, &mut rng);
        m.b_h.fill(0.3);
        m.b_y.fill(0.2);
        let batch = random_batch(&mut rng, 6, 4);
        assert!(fd_check(&m, &batch) < 1e-4);
    }

    #[test]
    fn output_bias_gradient_is_mean_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = RnnModel::init_xavier(small_dims(), 1.0, Activation::Tanh, Activation::Tanh, &mut rng);
        let batch = random_batch(&mut rng, 5, 4);
        let g = bptt_grad(&m, &batch).unwrap();
        let mut expect = Array1::<f64>::zeros(2);
        for ex in &batch {
            let h = m.final_hidden(&ex.sequence);
            let y = m.readout(h.view());
            for o in 0..2 {
                let t = if o == ex.target { 1.0 } else { 0.0 };
                expect[o] += (y[o] - t) * (1.0 - y[o] * y[o]) / batch.len() as f64;
            }
        }
        for o in 0..2 {
            assert!((g.b_y[o] - expect[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn full_batch_gradient_is_mean_of_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let m = RnnModel::init_xavier(small_dims(), 1.0, Activation::Tanh, Activation::Relu, &mut rng);
        let batch = random_batch(&mut rng, 9, 6);
        let full = bptt_grad(&m, &batch).unwrap();
        let mut acc = Gradients::zeros(m.dims());
        for ex in &batch {
            acc.add_scaled(&bptt_grad(&m, std::slice::from_ref(ex)).unwrap(), 1.0);
        }
        acc.scale(1.0 / batch.len() as f64);
        let scale = full.max_abs();
        for (a, b) in full.blocks().iter().zip(acc.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * scale.max(1e-300));
            }
        }
    }

    #[test]
    fn every_step_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let m = RnnModel::init_xavier(small_dims(), 1.2, Activation::Tanh, Activation::Tanh, &mut rng);
        let batch = random_batch(&mut rng, 5, 5);
        let refs: Vec<&Example> = batch.iter().collect();
        let loss = |m: &RnnModel| batch_loss_grad(m, &refs, LossMode::EveryStep, false).unwrap().0;
        let g = batch_loss_grad(&m, &refs, LossMode::EveryStep, true).unwrap().1.unwrap();
        let eps = 1e-5;
        for block in 0..5 {
            for i in 0..m.blocks()[block].len() {
                let mut p = m.clone();
                p.blocks_mut()[block][i] += eps;
                let mut q = m.clone();
                q.blocks_mut()[block][i] -= eps;
                let num = (loss(&p) - loss(&q)) / (2.0 * eps);
                assert!((num - g.blocks()[block][i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn tiny_parity_converges_and_is_deterministic() {
        let data = make_dataset(&parity_dfa(), &all_sequences(2, 3)).unwrap();
        // 14 examples: at the default batch size every epoch would be a
        // single full-batch step, so use per-example updates here
        let config = TrainConfig {
            epochs: 500,
            seed: 3,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = init_model(&config, 2, 2);
            let log = train(&mut m, &data, &config, &mut NoObserver).unwrap();
            (m, log)
        };
        let (m1, log1) = run();
        let (m2, log2) = run();
        assert_eq!(m1, m2);
        assert_eq!(log1, log2);
        assert_eq!(log1.losses.len(), 501);
        assert!(log1.final_loss() < 1e-2, "final loss {}", log1.final_loss());
    }
}
