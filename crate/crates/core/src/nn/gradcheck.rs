//! Backpropagation against central finite differences.

use ndarray::{Array1, ArrayView2};
use rand_distr::{Distribution, Normal};

use super::{eval_loss, init_model, Activation, LossKind, MlpConfig, MlpModel};
use crate::error::Result;
use crate::rng;

/// Parameters whose ±`KINK_MARGIN` neighbourhood crosses a ReLU, hinge,
/// absolute-error or L1 kink are excluded from the comparison.
pub const KINK_MARGIN: f64 = 1e-4;

/// Denominator floor for the relative error. A central difference at
/// ε = 1e-6 carries about `f64::EPSILON * loss / ε` ≈ 5e-11 of roundoff per
/// sample, so gradients below ~1e-5 cannot be resolved to 1e-5 relative
/// accuracy and are compared against this floor instead.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// (layer, "w"/"b", flat index) of the worst parameter.
    pub worst: Option<(usize, &'static str, usize)>,
}

/// Which side of every kink the batch sits on.
fn kink_signature(model: &MlpModel, x: ArrayView2<'_, f64>, labels: &[f64]) -> Vec<bool> {
    let cache = model.forward(x, None).expect("shapes checked by caller");
    let mut sig = Vec::new();
    if model.config.activation == Activation::Relu {
        for z in &cache.pre {
            sig.extend(z.iter().map(|&v| v > 0.0));
        }
    }
    match model.config.loss {
        LossKind::Hinge => sig.extend(cache.probabilities.iter().zip(labels).map(|(&p, &y)| {
            let t = if y >= 0.5 { 1.0 } else { -1.0 };
            1.0 - t * (2.0 * p - 1.0) > 0.0
        })),
        LossKind::Mae => sig.extend(cache.probabilities.iter().zip(labels).map(|(&p, &y)| p > y)),
        LossKind::Mse | LossKind::Bce => {}
    }
    sig
}

fn param_mut<'a>(model: &'a mut MlpModel, layer: usize, kind: &str, flat: usize) -> &'a mut f64 {
    let l = &mut model.layers[layer];
    if kind == "w" {
        let cols = l.weights.ncols();
        &mut l.weights[[flat / cols, flat % cols]]
    } else {
        &mut l.bias[flat]
    }
}

fn sample_losses(model: &MlpModel, x: ArrayView2<'_, f64>, labels: &[f64]) -> Vec<f64> {
    let p: Array1<f64> = model.predict(x).expect("shapes checked by caller");
    p.iter().zip(labels).map(|(&p, &y)| model.config.loss.sample_loss(p, y)).collect()
}

/// Build a model from `config` (dropout forced off, biases jittered so the
/// check is not done at the all-zero-bias point) and compare every analytic
/// partial derivative with `(L(θ+ε) − L(θ−ε)) / 2ε`.
pub fn grad_check(config: &MlpConfig, x: ArrayView2<'_, f64>, labels: &[f64], epsilon: f64) -> Result<GradCheckReport> {
    let mut cfg = config.clone();
    cfg.dropout_rate = 0.0;
    let mut model = init_model(cfg)?;
    let mut jitter_rng = rng::stream(config.seed, "gradcheck-bias");
    let jitter = Normal::new(0.0, 0.1).expect("valid std");
    for layer in &mut model.layers {
        layer.bias.mapv_inplace(|_| jitter.sample(&mut jitter_rng));
    }

    // Fails early on an empty or mismatched batch.
    eval_loss(&model, x, labels)?;
    let cache = model.forward(x, None)?;
    let analytic = model.backward(&cache, labels)?;
    let base_sig = kink_signature(&model, x, labels);
    let l1_active = model.config.l1_lambda > 0.0;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for layer in 0..model.layers.len() {
        for (kind, count) in [("w", model.layers[layer].weights.len()), ("b", model.layers[layer].bias.len())] {
            for flat in 0..count {
                let theta = *param_mut(&mut model, layer, kind, flat);
                if kind == "w" && l1_active && theta.abs() < KINK_MARGIN {
                    report.skipped += 1;
                    continue;
                }
                let mut near_kink = false;
                if !base_sig.is_empty() {
                    for d in [KINK_MARGIN, -KINK_MARGIN] {
                        *param_mut(&mut model, layer, kind, flat) = theta + d;
                        near_kink |= kink_signature(&model, x, labels) != base_sig;
                    }
                }
                if near_kink {
                    *param_mut(&mut model, layer, kind, flat) = theta;
                    report.skipped += 1;
                    continue;
                }
                *param_mut(&mut model, layer, kind, flat) = theta + epsilon;
                let plus = sample_losses(&model, x, labels);
                *param_mut(&mut model, layer, kind, flat) = theta - epsilon;
                let minus = sample_losses(&model, x, labels);
                *param_mut(&mut model, layer, kind, flat) = theta;

                // Same difference quotient as (L(θ+ε) − L(θ−ε)) / 2ε, but the
                // terms are differenced before summing so the roundoff of a
                // ~1.0 total does not swamp gradients near the floor. The L1
                // term only changes through θ itself.
                let data = plus.iter().zip(&minus).map(|(a, b)| a - b).sum::<f64>() / labels.len() as f64;
                let penalty = if kind == "w" {
                    model.config.l1_lambda * ((theta + epsilon).abs() - (theta - epsilon).abs())
                } else {
                    0.0
                };
                let numeric = (data + penalty) / (2.0 * epsilon);
                let exact = if kind == "w" {
                    let w = &analytic.layers[layer].weights;
                    w[[flat / w.ncols(), flat % w.ncols()]]
                } else {
                    analytic.layers[layer].bias[flat]
                };
                let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
                report.checked += 1;
                if rel > report.max_relative_error {
                    report.max_relative_error = rel;
                    report.worst = Some((layer, kind, flat));
                }
            }
        }
    }
    Ok(report)
}
