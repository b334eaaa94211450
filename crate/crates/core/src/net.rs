//! Fully-connected rectifier network with reverse-mode gradients and Adam.
//!
//! Batches are row-major in the sense of examples: a batch is a `B x p`
//! matrix whose rows are inputs.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_out x fan_in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weight: DMatrix::zeros(fan_out, fan_in),
            bias: DVector::zeros(fan_out),
        }
    }
}

/// Flat views over a set of parameter blocks, in a fixed order.
pub trait Parameters {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;
}

/// ReLU on hidden layers, identity on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    seed: u64,
}

impl DenseNet {
    /// He-style uniform initialization, `U(-√(6/fan_in), √(6/fan_in))`, zero
    /// biases.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| {
                        rng.random_range(-bound..bound)
                    }),
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Ok(DenseNet {
            layer_dims: layer_dims.to_vec(),
            layers,
            seed,
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        Ok(DenseNet {
            layer_dims: layer_dims.to_vec(),
            layers: layer_dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            seed: 0,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("layers"));
        }
        let mut dims = vec![layers[0].weight.ncols()];
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.ncols() != dims[i] {
                return Err(Error::shape("layer fan-in", dims[i], layer.weight.ncols()));
            }
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::shape("layer bias", layer.weight.nrows(), layer.bias.len()));
            }
            dims.push(layer.weight.nrows());
        }
        check_dims(&dims)?;
        Ok(DenseNet {
            layer_dims: dims,
            layers,
            seed,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two dims")
    }

    /// `Σ (fan_in + 1) fan_out`.
    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.len()));
        }
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            a = &layer.weight * &a + &layer.bias;
            if i < last {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        Ok(a)
    }

    /// Forward pass over the rows of `x`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_recorded(x)?.0)
    }

    /// Forward pass that keeps every layer input for [`DenseNet::backward`].
    pub fn forward_recorded(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Tape)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("batch width", self.input_dim(), x.ncols()));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &a * layer.weight.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.bias.transpose();
            }
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut a, z));
        }
        Ok((
            a,
            Tape {
                layer_dims: self.layer_dims.clone(),
                inputs,
            },
        ))
    }

    /// Parameter gradients given `∂loss/∂output` for the recorded batch.
    pub fn backward(&self, tape: &Tape, grad_output: &DMatrix<f64>) -> Result<NetGrads> {
        if tape.layer_dims != self.layer_dims {
            return Err(Error::State(
                "tape was recorded by a network with different layer sizes".into(),
            ));
        }
        let batch = tape.inputs[0].nrows();
        if grad_output.shape() != (batch, self.output_dim()) {
            return Err(Error::shape(
                "output gradient",
                format!("{}x{}", batch, self.output_dim()),
                format!("{}x{}", grad_output.nrows(), grad_output.ncols()),
            ));
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[i];
            let weight = delta.transpose() * input;
            let bias = delta.row_sum().transpose();
            grads.push(Layer { weight, bias });
            if i > 0 {
                let mut upstream = &delta * &layer.weight;
                // the input of layer i is a ReLU output, positive exactly where active
                upstream.zip_apply(input, |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = upstream;
            }
        }
        grads.reverse();
        Ok(NetGrads { layers: grads })
    }

    /// `∂loss/∂input` for the recorded batch; used where inputs are
    /// themselves parameters.
    pub fn input_gradient(&self, tape: &Tape, grad_output: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if tape.layer_dims != self.layer_dims {
            return Err(Error::State(
                "tape was recorded by a network with different layer sizes".into(),
            ));
        }
        let mut delta = grad_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            delta = &delta * &layer.weight;
            if i > 0 {
                delta.zip_apply(&tape.inputs[i], |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
            }
        }
        Ok(delta)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidParameter(
            "a network needs an input and an output size".into(),
        ));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "layer sizes must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

impl Parameters for DenseNet {
    fn blocks(&self) -> Vec<&[f64]> {
        layer_blocks(&self.layers)
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        layer_blocks_mut(&mut self.layers)
    }
}

pub(crate) fn layer_blocks(layers: &[Layer]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
        .collect()
}

pub(crate) fn layer_blocks_mut(layers: &mut [Layer]) -> Vec<&mut [f64]> {
    layers
        .iter_mut()
        .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
        .collect()
}

/// Layer inputs recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    layer_dims: Vec<usize>,
    inputs: Vec<DMatrix<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Gradients shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<Layer>,
}

impl Parameters for NetGrads {
    fn blocks(&self) -> Vec<&[f64]> {
        layer_blocks(&self.layers)
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        layer_blocks_mut(&mut self.layers)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P, learning_rate: f64) -> Self {
        let shapes: Vec<usize> = params.blocks().iter().map(|b| b.len()).collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    /// Gradient-descent step on `params` (minimizes the loss whose gradient
    /// is `grads`).
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: Parameters + ?Sized,
        G: Parameters + ?Sized,
    {
        let grad_blocks = grads.blocks();
        let mut param_blocks = params.blocks_mut();
        if grad_blocks.len() != self.first.len() || param_blocks.len() != self.first.len() {
            return Err(Error::shape(
                "adam parameter blocks",
                self.first.len(),
                format!("{} params / {} grads", param_blocks.len(), grad_blocks.len()),
            ));
        }
        for (i, (p, g)) in param_blocks.iter().zip(&grad_blocks).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(Error::shape("adam block", self.first[i].len(), g.len()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (bi, (p, g)) in param_blocks.iter_mut().zip(&grad_blocks).enumerate() {
            let m = &mut self.first[bi];
            let v = &mut self.second[bi];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every_epochs` epochs.
    StepDecay { factor: f64, every_epochs: usize },
}

impl LrSchedule {
    pub fn rate(&self, initial: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => initial,
            LrSchedule::StepDecay {
                factor,
                every_epochs,
            } => initial * factor.powi((epoch / every_epochs) as i32),
        }
    }
}

/// Defaults are desk scale. The MNIST preset, [`TrainConfig::mnist`], runs
/// 200 epochs from a rate of `1e-4` decayed by 0.97 every 2 epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 50,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale MNIST schedule. The batch size of 100 is a choice, not a
    /// published value.
    pub fn mnist() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 100,
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::StepDecay {
                factor: 0.97,
                every_epochs: 2,
            },
            seed: 0,
        }
    }

    /// Collects every offending key rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs < 1 {
            bad.push("train.epochs must be >= 1".to_string());
        }
        if self.batch_size < 1 {
            bad.push("train.batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push("train.learning_rate must be > 0".to_string());
        }
        if let LrSchedule::StepDecay {
            factor,
            every_epochs,
        } = self.lr_schedule
        {
            if !(factor > 0.0 && factor.is_finite()) {
                bad.push("train.lr_schedule.factor must be > 0".to_string());
            }
            if every_epochs < 1 {
                bad.push("train.lr_schedule.every_epochs must be >= 1".to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Per-epoch shuffled index batches; the last partial batch is kept.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Shuffling stream for a training run, separate from initialization.
pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn gather_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}
