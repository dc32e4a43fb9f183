use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{Dense, Gradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    Sgd {
        learning_rate: f64,
        momentum: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd {
            learning_rate,
            momentum,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        match OptimizerConfig::default() {
            OptimizerConfig::Adam {
                beta1, beta2, epsilon, ..
            } => OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            },
            sgd => sgd,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Adam { .. } => "adam",
            OptimizerConfig::Sgd { .. } => "sgd",
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { learning_rate, .. } | OptimizerConfig::Sgd { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::validation("optimizer.learning_rate", "must be positive"));
        }
        match *self {
            OptimizerConfig::Adam {
                beta1, beta2, epsilon, ..
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::validation("optimizer.beta", "betas must be in [0, 1)"));
                }
                if !(epsilon > 0.0) {
                    return Err(Error::validation("optimizer.epsilon", "must be positive"));
                }
            }
            OptimizerConfig::Sgd { momentum, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::validation("optimizer.momentum", "must be in [0, 1)"));
                }
            }
        }
        Ok(())
    }
}

/// Accumulators shaped like the model parameters: Adam first and second
/// moments, or SGD velocity (held in `first`, `second` unused and empty).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Dense>,
    pub second: Vec<Dense>,
}

fn zeros_like(layers: &[Dense]) -> Vec<Dense> {
    layers
        .iter()
        .map(|l| Dense {
            weights: Array2::zeros(l.weights.raw_dim()),
            bias: Array1::zeros(l.bias.raw_dim()),
        })
        .collect()
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, layers: &[Dense]) -> Self {
        match config {
            OptimizerConfig::Adam { .. } => OptimizerState {
                first: zeros_like(layers),
                second: zeros_like(layers),
            },
            OptimizerConfig::Sgd { .. } => OptimizerState {
                first: zeros_like(layers),
                second: Vec::new(),
            },
        }
    }

    /// `step` is the 1-based index of this update.
    pub(super) fn update(&mut self, config: &OptimizerConfig, step: u64, params: &mut [Dense], grads: &Gradients) {
        match *config {
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                let t = step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let adam = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                };
                for (((p, g), m), v) in params.iter_mut().zip(&grads.layers).zip(&mut self.first).zip(&mut self.second) {
                    Zip::from(&mut p.weights)
                        .and(&g.weights)
                        .and(&mut m.weights)
                        .and(&mut v.weights)
                        .for_each(adam);
                    Zip::from(&mut p.bias)
                        .and(&g.bias)
                        .and(&mut m.bias)
                        .and(&mut v.bias)
                        .for_each(adam);
                }
            }
            OptimizerConfig::Sgd {
                learning_rate,
                momentum,
            } => {
                let sgd = |p: &mut f64, g: &f64, vel: &mut f64| {
                    *vel = momentum * *vel - learning_rate * g;
                    *p += *vel;
                };
                for ((p, g), vel) in params.iter_mut().zip(&grads.layers).zip(&mut self.first) {
                    Zip::from(&mut p.weights).and(&g.weights).and(&mut vel.weights).for_each(sgd);
                    Zip::from(&mut p.bias).and(&g.bias).and(&mut vel.bias).for_each(sgd);
                }
            }
        }
    }
}
