//! Dense feed-forward network with a single sigmoid output, written out by
//! hand: forward pass, backpropagation, four losses, L1 weight penalty and
//! inverted dropout. Everything is `f64`.
//!
//! Layer `l` maps `A[l-1]` (rows = samples) to `Z[l] = A[l-1] W[l] + b[l]`
//! and `A[l] = act(Z[l])`, with dropout masks applied to hidden activations
//! during training only. The output is `p = sigmoid(z)`.

mod checkpoint;
mod gradcheck;
mod optim;

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use gradcheck::{grad_check, GradCheckReport, KINK_MARGIN};
pub use optim::{OptimizerConfig, OptimizerState};

/// SELU constants (Klambauer et al.).
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Selu,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Tanh, Activation::Relu, Activation::Selu];

    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp_m1()
                }
            }
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp()
                }
            }
        }
    }

    /// Initialization gain: He for ReLU, LeCun otherwise.
    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            Activation::Tanh | Activation::Selu => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Selu => "selu",
        })
    }
}

/// Per-sample loss on the sigmoid output `p` against a 0/1 label.
///
/// `Hinge` maps the label to ±1 and uses the margin score `2p - 1`:
/// `max(0, 1 - y * (2p - 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
    Bce,
    Hinge,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Mse, LossKind::Mae, LossKind::Bce, LossKind::Hinge];

    pub fn sample_loss(self, p: f64, y: f64) -> f64 {
        match self {
            LossKind::Mse => (p - y) * (p - y),
            LossKind::Mae => (p - y).abs(),
            // Only the term selected by the label is evaluated so that a
            // perfect prediction gives exactly zero. A saturated sigmoid
            // rounds to exactly 0 or 1; the floor keeps the loss finite.
            LossKind::Bce => {
                if y >= 0.5 {
                    -p.max(f64::MIN_POSITIVE).ln()
                } else {
                    -(1.0 - p).max(f64::MIN_POSITIVE).ln()
                }
            }
            LossKind::Hinge => (1.0 - signed(y) * (2.0 * p - 1.0)).max(0.0),
        }
    }

    /// d(sample loss)/dp; zero at the non-differentiable points.
    fn dloss_dp(self, p: f64, y: f64) -> f64 {
        match self {
            LossKind::Mse => 2.0 * (p - y),
            LossKind::Mae => sign(p - y),
            LossKind::Bce => {
                if y >= 0.5 {
                    -1.0 / p
                } else {
                    1.0 / (1.0 - p)
                }
            }
            LossKind::Hinge => {
                let t = signed(y);
                if 1.0 - t * (2.0 * p - 1.0) > 0.0 {
                    -2.0 * t
                } else {
                    0.0
                }
            }
        }
    }

    /// d(sample loss)/dz for `p = sigmoid(z)`.
    fn dloss_dz(self, p: f64, y: f64) -> f64 {
        match self {
            // Simplified form; avoids 1/p blowing up when p saturates.
            LossKind::Bce => p - y,
            other => other.dloss_dp(p, y) * p * (1.0 - p),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Bce => "bce",
            LossKind::Hinge => "hinge",
        })
    }
}

fn signed(y: f64) -> f64 {
    if y >= 0.5 {
        1.0
    } else {
        -1.0
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub const MIN_DEPTH: usize = 2;
pub const MAX_DEPTH: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    pub l1_lambda: f64,
    pub dropout_rate: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Linear models (the logistic and linear-SVM baselines) have no hidden
    /// layers; every other network needs between 2 and 15.
    #[serde(default)]
    pub linear: bool,
}

/// Hidden widths starting at the input width and halving per layer, never
/// below `floor`.
pub fn tapered_widths(input_dim: usize, depth: usize, floor: usize) -> Vec<usize> {
    let mut w = input_dim.max(floor);
    (0..depth)
        .map(|_| {
            let out = w;
            w = (w / 2).max(floor);
            out
        })
        .collect()
}

pub const DEFAULT_WIDTH_FLOOR: usize = 8;

impl MlpConfig {
    /// Ten tanh layers, Adam, mean squared error; L1 1e-5 and dropout 0.1.
    pub fn default_network(input_dim: usize, seed: u64) -> Self {
        MlpConfig {
            input_dim,
            hidden_layers: tapered_widths(input_dim, 10, DEFAULT_WIDTH_FLOOR),
            activation: Activation::Tanh,
            loss: LossKind::Mse,
            l1_lambda: 1e-5,
            dropout_rate: 0.1,
            optimizer: OptimizerConfig::default(),
            seed,
            linear: false,
        }
    }

    pub fn linear_model(input_dim: usize, loss: LossKind, seed: u64) -> Self {
        MlpConfig {
            input_dim,
            hidden_layers: Vec::new(),
            activation: Activation::Tanh,
            loss,
            l1_lambda: 1e-5,
            dropout_rate: 0.0,
            optimizer: OptimizerConfig::default(),
            seed,
            linear: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::validation("input_dim", "must be at least 1"));
        }
        let depth = self.hidden_layers.len();
        if self.linear {
            if depth != 0 {
                return Err(Error::validation("hidden_layers", "a linear model has no hidden layers"));
            }
        } else if !(MIN_DEPTH..=MAX_DEPTH).contains(&depth) {
            return Err(Error::validation(
                "hidden_layers",
                format!("{depth} hidden layers; supported depths are {MIN_DEPTH} to {MAX_DEPTH}"),
            ));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::validation("hidden_layers", "widths must be at least 1"));
        }
        if !(self.l1_lambda >= 0.0 && self.l1_lambda.is_finite()) {
            return Err(Error::validation("l1_lambda", "must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("dropout_rate", "must be in [0, 1)"));
        }
        self.optimizer.validate()
    }

    /// (fan_in, fan_out) of every layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_layers);
        dims.push(1);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn describe(&self) -> String {
        if self.linear {
            format!("linear/{}/{}", self.loss, self.optimizer.name())
        } else {
            format!(
                "{}x{}/{}/{}",
                self.hidden_layers.len(),
                self.activation,
                self.loss,
                self.optimizer.name()
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub config: MlpConfig,
    /// Hidden layers followed by the output layer.
    pub layers: Vec<Dense>,
    pub optimizer: OptimizerState,
    /// Optimizer steps taken so far.
    pub step: u64,
}

/// Gradients with the same shapes as [`MlpModel::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Array2<f64>>,
    /// Post-activation (and post-dropout) outputs of each hidden layer.
    pub post: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers; empty when dropout was not applied.
    pub masks: Vec<Array2<f64>>,
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
    /// Model step at the time of the pass.
    step: u64,
}

/// Initialize weights from N(0, gain / fan_in), biases at zero.
pub fn init_model(config: MlpConfig) -> Result<MlpModel> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, "init");
    let shapes = config.layer_shapes();
    let last = shapes.len() - 1;
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(i, &(fan_in, fan_out))| {
            let gain = if i == last { 1.0 } else { config.activation.init_gain() };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            Dense {
                weights: Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(&mut rng)),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect::<Vec<_>>();
    let optimizer = OptimizerState::new(&config.optimizer, &layers);
    Ok(MlpModel {
        config,
        layers,
        optimizer,
        step: 0,
    })
}

impl MlpModel {
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Forward pass. Dropout is applied, with inverted scaling, only when a
    /// mask generator is supplied.
    pub fn forward(&self, x: ArrayView2<'_, f64>, dropout: Option<&mut StreamRng>) -> Result<ForwardCache> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "batch width {} but model input_dim {}",
                x.ncols(),
                self.config.input_dim
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::Precondition("empty batch".into()));
        }
        let rate = self.config.dropout_rate;
        let mut dropout = dropout.filter(|_| rate > 0.0);
        let act = self.config.activation;
        let mut pre = Vec::with_capacity(self.depth());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.depth());
        let mut masks = Vec::new();
        for layer in &self.layers[..self.depth()] {
            let input = post.last().map(|a| a.view()).unwrap_or(x);
            let z = input.dot(&layer.weights) + &layer.bias;
            let mut a = z.mapv(|v| act.apply(v));
            if let Some(rng) = dropout.as_deref_mut() {
                let keep = 1.0 - rate;
                let mask = Array2::from_shape_simple_fn(a.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                a *= &mask;
                masks.push(mask);
            }
            pre.push(z);
            post.push(a);
        }
        let out = &self.layers[self.depth()];
        let input = post.last().map(|a| a.view()).unwrap_or(x);
        let logits = input.dot(&out.weights).column(0).to_owned() + out.bias[0];
        let probabilities = logits.mapv(sigmoid);
        Ok(ForwardCache {
            input: x.to_owned(),
            pre,
            post,
            masks,
            logits,
            probabilities,
            step: self.step,
        })
    }

    /// Evaluation-mode probabilities.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x, None)?.probabilities)
    }

    /// Sum of absolute weights (biases are not penalized).
    pub fn l1_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.iter().map(|w| w.abs()).sum::<f64>()).sum()
    }

    /// Gradient of the mean loss plus the L1 penalty.
    pub fn backward(&self, cache: &ForwardCache, labels: &[f64]) -> Result<Gradients> {
        if cache.step != self.step {
            return Err(Error::Precondition(format!(
                "stale forward cache from step {} used at step {}",
                cache.step, self.step
            )));
        }
        let n = labels.len();
        if n != cache.probabilities.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} predictions",
                n,
                cache.probabilities.len()
            )));
        }
        let loss = self.config.loss;
        let scale = 1.0 / n as f64;
        let mut delta = Array2::from_shape_fn((n, 1), |(i, _)| {
            loss.dloss_dz(cache.probabilities[i], labels[i]) * scale
        });
        let depth = self.depth();
        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..=depth).rev() {
            let input = if l == 0 { cache.input.view() } else { cache.post[l - 1].view() };
            let layer = &self.layers[l];
            let mut dw = input.t().dot(&delta);
            if self.config.l1_lambda > 0.0 {
                let lambda = self.config.l1_lambda;
                Zip::from(&mut dw).and(&layer.weights).for_each(|g, &w| *g += lambda * sign(w));
            }
            let db = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut upstream = delta.dot(&layer.weights.t());
                if !cache.masks.is_empty() {
                    upstream *= &cache.masks[l - 1];
                }
                let act = self.config.activation;
                Zip::from(&mut upstream)
                    .and(&cache.pre[l - 1])
                    .for_each(|d, &z| *d *= act.derivative(z));
                delta = upstream;
            }
            grads.push(Dense { weights: dw, bias: db });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Apply one optimizer update.
    pub fn optimizer_step(&mut self, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, p)| g.weights.dim() != p.weights.dim() || g.bias.dim() != p.bias.dim())
        {
            return Err(Error::Shape("gradient shapes do not match parameters".into()));
        }
        for (i, g) in grads.layers.iter().enumerate() {
            if g.weights.iter().chain(g.bias.iter()).any(|v| !v.is_finite()) {
                let name = if i == self.depth() {
                    "output layer".to_string()
                } else {
                    format!("hidden layer {}", i + 1)
                };
                return Err(Error::Training(format!("non-finite gradient in {name}")));
            }
        }
        self.step += 1;
        self.optimizer.update(&self.config.optimizer, self.step, &mut self.layers, grads);
        if !self.all_finite() {
            return Err(Error::Training(format!("parameters overflowed at step {}", self.step)));
        }
        Ok(())
    }

    /// One forward/backward/update cycle on a batch; returns the batch loss.
    pub fn train_batch(&mut self, x: ArrayView2<'_, f64>, labels: &[f64], dropout: Option<&mut StreamRng>) -> Result<f64> {
        let cache = self.forward(x, dropout)?;
        let loss = loss_eval(self.config.loss, cache.probabilities.as_slice().unwrap(), labels, self, self.config.l1_lambda)?;
        let grads = self.backward(&cache, labels)?;
        self.optimizer_step(&grads)?;
        Ok(loss)
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Mean per-sample loss plus `l1_lambda` times the summed absolute weights.
pub fn loss_eval(kind: LossKind, probabilities: &[f64], labels: &[f64], model: &MlpModel, l1_lambda: f64) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(Error::Precondition("loss of an empty batch".into()));
    }
    if probabilities.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let data = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| kind.sample_loss(p, y))
        .sum::<f64>()
        / probabilities.len() as f64;
    let penalty = if l1_lambda > 0.0 { l1_lambda * model.l1_norm() } else { 0.0 };
    Ok(data + penalty)
}

/// Loss of the model in evaluation mode.
pub fn eval_loss(model: &MlpModel, x: ArrayView2<'_, f64>, labels: &[f64]) -> Result<f64> {
    let p = model.predict(x)?;
    loss_eval(model.config.loss, p.as_slice().unwrap(), labels, model, model.config.l1_lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn config(hidden: Vec<usize>, input_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden_layers: hidden,
            activation: Activation::Tanh,
            loss: LossKind::Mse,
            l1_lambda: 0.0,
            dropout_rate: 0.0,
            optimizer: OptimizerConfig::default(),
            seed: 3,
            linear: false,
        }
    }

    fn zero_model(cfg: MlpConfig) -> MlpModel {
        let mut m = init_model(cfg).unwrap();
        for l in &mut m.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        m
    }

    #[test]
    fn shape_chain() {
        let m = init_model(config(vec![4, 4], 3)).unwrap();
        let shapes: Vec<_> = m.layers.iter().map(|l| l.weights.dim()).collect();
        assert_eq!(shapes, vec![(3, 4), (4, 4), (4, 1)]);
        assert!(m.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_is_seeded() {
        let a = init_model(config(vec![5, 3], 4)).unwrap();
        let b = init_model(config(vec![5, 3], 4)).unwrap();
        assert_eq!(a, b);
        let mut other = config(vec![5, 3], 4);
        other.seed = 4;
        assert_ne!(a.layers, init_model(other).unwrap().layers);
    }

    #[test]
    fn depth_limits() {
        assert!(init_model(config(vec![], 3)).is_err());
        assert!(init_model(config(vec![4], 3)).is_err());
        assert!(init_model(config(vec![2; 15], 3)).is_ok());
        assert!(init_model(config(vec![2; 16], 3)).is_err());
        assert!(init_model(config(vec![4, 0], 3)).is_err());
        assert!(init_model(MlpConfig::linear_model(3, LossKind::Bce, 1)).is_ok());
        let mut bad = MlpConfig::linear_model(3, LossKind::Bce, 1);
        bad.hidden_layers = vec![2, 2];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tapering_widths() {
        assert_eq!(tapered_widths(100, 4, 8), vec![100, 50, 25, 12]);
        assert_eq!(tapered_widths(40, 5, 8), vec![40, 20, 10, 8, 8]);
        assert_eq!(tapered_widths(3, 2, 8), vec![8, 8]);
    }

    #[test]
    fn zero_model_outputs_one_half() {
        let m = zero_model(config(vec![4, 4], 3));
        let x = array![[1.0, -2.0, 3.0], [100.0, 0.5, -7.0]];
        let p = m.predict(x.view()).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let m = init_model(config(vec![4, 4], 3)).unwrap();
        let x = Array2::<f64>::zeros((2, 4));
        assert!(matches!(m.forward(x.view(), None), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_mode_is_deterministic_and_bounded() {
        let mut cfg = config(vec![6, 6], 5);
        cfg.dropout_rate = 0.5;
        let m = init_model(cfg).unwrap();
        let mut rng = rng::stream(1, "inputs");
        let x = Array2::from_shape_fn((1000, 5), |_| rng.random_range(-5.0..5.0));
        let a = m.predict(x.view()).unwrap();
        let b = m.predict(x.view()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn loss_values() {
        let m = zero_model(config(vec![2, 2], 1));
        assert_eq!(loss_eval(LossKind::Mse, &[0.5], &[1.0], &m, 0.0).unwrap(), 0.25);
        assert_eq!(loss_eval(LossKind::Bce, &[1.0, 0.0], &[1.0, 0.0], &m, 0.0).unwrap(), 0.0);
        let mae = loss_eval(LossKind::Mae, &[0.2, 0.8], &[0.0, 1.0], &m, 0.0).unwrap();
        assert!((mae - 0.2).abs() < 1e-15);
        // hinge: y=+1, p=0.75 -> margin score 0.5 -> loss 0.5
        assert_eq!(loss_eval(LossKind::Hinge, &[0.75], &[1.0], &m, 0.0).unwrap(), 0.5);
        assert!(loss_eval(LossKind::Mse, &[], &[], &m, 0.0).is_err());
    }

    #[test]
    fn l1_term_is_added() {
        let mut m = zero_model(config(vec![2, 2], 1));
        m.layers[0].weights[[0, 0]] = -3.0;
        m.layers[2].weights[[1, 0]] = 1.0;
        m.layers[1].bias[0] = 10.0;
        let l = loss_eval(LossKind::Mse, &[0.5], &[1.0], &m, 0.01).unwrap();
        assert!((l - (0.25 + 0.04)).abs() < 1e-15);
    }

    #[test]
    fn perfect_mse_batch_has_no_data_gradient() {
        // A saturated output makes p equal the labels exactly.
        let mut m = init_model(config(vec![3, 3], 2)).unwrap();
        m.layers[2].bias[0] = 80.0;
        let x = array![[0.3, -0.1], [1.0, 2.0]];
        let cache = m.forward(x.view(), None).unwrap();
        assert!(cache.probabilities.iter().all(|&p| p == 1.0));
        let g = m.backward(&cache, &[1.0, 1.0]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn hinge_outside_margin_has_zero_gradient() {
        let mut cfg = config(vec![3, 3], 2);
        cfg.loss = LossKind::Hinge;
        let mut m = init_model(cfg).unwrap();
        m.layers[2].bias[0] = 80.0;
        let x = array![[0.3, -0.1], [1.0, 2.0], [-4.0, 0.0]];
        let cache = m.forward(x.view(), None).unwrap();
        let labels = [1.0, 1.0, 1.0];
        assert_eq!(loss_eval(LossKind::Hinge, cache.probabilities.as_slice().unwrap(), &labels, &m, 0.0).unwrap(), 0.0);
        assert_eq!(m.backward(&cache, &labels).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn duplicated_batch_gives_same_mean_gradient() {
        let mut cfg = config(vec![4, 3], 3);
        cfg.l1_lambda = 1e-3;
        let m = init_model(cfg).unwrap();
        let x = array![[0.1, 0.2, -0.3], [1.0, -1.0, 0.5], [0.0, 0.3, 0.9]];
        let y = [1.0, 0.0, 1.0];
        let g1 = m.backward(&m.forward(x.view(), None).unwrap(), &y).unwrap();
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let y2 = [y, y].concat();
        let g2 = m.backward(&m.forward(x2.view(), None).unwrap(), &y2).unwrap();
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            for (u, v) in a.weights.iter().zip(&b.weights) {
                assert!((u - v).abs() < 1e-15);
            }
            for (u, v) in a.bias.iter().zip(&b.bias) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = init_model(config(vec![3, 3], 2)).unwrap();
        let x = array![[0.3, -0.1]];
        let cache = m.forward(x.view(), None).unwrap();
        let g = m.backward(&cache, &[1.0]).unwrap();
        m.optimizer_step(&g).unwrap();
        assert!(matches!(m.backward(&cache, &[1.0]), Err(Error::Precondition(_))));
    }

    #[test]
    fn nan_gradient_names_the_layer() {
        let mut m = init_model(config(vec![3, 3], 2)).unwrap();
        let mut g = Gradients::zeros_like(&m);
        g.layers[1].weights[[0, 0]] = f64::NAN;
        match m.optimizer_step(&g) {
            Err(Error::Training(msg)) => assert!(msg.contains("hidden layer 2"), "{msg}"),
            other => panic!("expected training error, got {other:?}"),
        }
        assert_eq!(m.step, 0);
    }

    #[test]
    fn dropout_expectation_matches_eval_output() {
        let mut cfg = config(vec![4, 4], 3);
        cfg.dropout_rate = 0.3;
        let m = init_model(cfg).unwrap();
        let x = array![[0.5, -1.0, 2.0]];
        let eval = m.forward(x.view(), None).unwrap();
        let mut rng = rng::stream(9, "mc");
        let trials = 10_000;
        let mut sum = Array2::<f64>::zeros(eval.post[0].raw_dim());
        for _ in 0..trials {
            sum += &m.forward(x.view(), Some(&mut rng)).unwrap().post[0];
        }
        let mean = sum / trials as f64;
        for (mc, exact) in mean.iter().zip(eval.post[0].iter()) {
            assert!((mc - exact).abs() <= 0.01 * exact.abs().max(0.05), "{mc} vs {exact}");
        }
    }

    #[test]
    fn selu_constants_and_continuity() {
        assert!((Activation::Selu.apply(1e-12) - Activation::Selu.apply(-1e-12)).abs() < 1e-11);
        assert!((Activation::Selu.apply(-50.0) + SELU_LAMBDA * SELU_ALPHA).abs() < 1e-12);
    }

    #[test]
    fn saturated_bce_stays_finite() {
        let l = LossKind::Bce.sample_loss(1.0, 0.0);
        assert!(l.is_finite() && l > 700.0);
        assert!(LossKind::Bce.sample_loss(0.0, 1.0).is_finite());
        assert_eq!(LossKind::Bce.sample_loss(1.0, 1.0), 0.0);
    }
}
