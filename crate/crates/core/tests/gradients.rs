use ndarray::Array2;
use phenoaudit::nn::{grad_check, tapered_widths, Activation, LossKind, MlpConfig, OptimizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(rows: usize, cols: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5));
    let y = (0..rows).map(|i| (i % 2) as f64).collect();
    (x, y)
}

fn config(activation: Activation, loss: LossKind, depth: usize, l1: f64, seed: u64) -> MlpConfig {
    MlpConfig {
        input_dim: 5,
        hidden_layers: tapered_widths(6, depth, 4),
        activation,
        loss,
        l1_lambda: l1,
        dropout_rate: 0.2,
        optimizer: OptimizerConfig::default(),
        seed,
        linear: false,
    }
}

#[test]
fn every_activation_loss_pair_matches_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..4 {
        let (x, y) = batch(8, 5, seed);
        for activation in Activation::ALL {
            for loss in LossKind::ALL {
                for depth in [2, 5, 10] {
                    for l1 in [0.0, 1e-3] {
                        let r = grad_check(&config(activation, loss, depth, l1, 17 + seed), x.view(), &y, 1e-6).unwrap();
                        assert!(r.checked > r.skipped, "{activation}/{loss}/{depth}: {r:?}");
                        assert!(r.max_relative_error < 1e-5, "{activation}/{loss}/{depth}/seed {seed}: {r:?}");
                        worst = worst.max(r.max_relative_error);
                    }
                }
            }
        }
    }
    println!("worst relative error {worst:.3e}");
}

#[test]
fn linear_models_pass_the_same_check() {
    let (x, y) = batch(8, 5, 3);
    for loss in [LossKind::Bce, LossKind::Hinge] {
        let r = grad_check(&MlpConfig::linear_model(5, loss, 4), x.view(), &y, 1e-6).unwrap();
        assert_eq!(r.checked + r.skipped, 6);
        assert!(r.max_relative_error < 1e-5, "{loss}: {r:?}");
    }
}
