//! The default desk-scale benchmark and training configuration. The CLI,
//! the integration tests, and the ordering benchmarks all pin these same
//! values so results stay comparable.

use crate::data::{BenchmarkSpec, ShiftSpec};
use crate::federation::{ModelSpec, TrainConfig};
use crate::losses::LossConfig;
use crate::nn::Activation;

/// [16 → 64 → 32] extractor with relu, linear 32 → 4 classifier head.
pub fn default_model_spec() -> ModelSpec {
    ModelSpec {
        feature_dim: 32,
        g_hidden: vec![64],
        f_hidden: vec![],
        activation: Activation::Relu,
    }
}

fn alternating(dims: usize, magnitude: f64) -> Vec<f64> {
    (0..dims).map(|j| if j % 2 == 0 { magnitude } else { -magnitude }).collect()
}

/// Four classes in 16 dimensions, four targets under distinct
/// rotation/translation/scale/noise shifts, clients keeping 10% of their
/// domain's examples for training.
pub fn default_benchmark() -> BenchmarkSpec {
    let dims = 16;
    BenchmarkSpec {
        name: "shift4".into(),
        classes: 4,
        dims,
        per_domain: 1200,
        shifts: vec![
            ShiftSpec { rotation: 0.60, translation: vec![], scale: 1.0, noise: 0.10 },
            ShiftSpec {
                rotation: 0.80,
                translation: alternating(dims, 0.50),
                scale: 1.0,
                noise: 0.10,
            },
            ShiftSpec {
                rotation: -0.80,
                translation: alternating(dims, -0.40),
                scale: 1.25,
                noise: 0.12,
            },
            ShiftSpec {
                rotation: 0.95,
                translation: alternating(dims, 0.45),
                scale: 0.85,
                noise: 0.15,
            },
        ],
        target_fraction: 0.1,
        class_separation: 3.0,
        within_class_stddev: 1.0,
    }
}

pub fn default_train_config() -> TrainConfig {
    TrainConfig {
        n_clients: 4,
        rounds: 20,
        client_steps: 5,
        server_iters: 10,
        pretrain_epochs: 2,
        batch_size: 64,
        client_lr: 0.01,
        server_lr: 0.005,
        server_momentum: 0.9,
        loss: LossConfig::default(),
        use_self_training: true,
        use_gmm_weighting: true,
        fl_reinit_each_round: false,
        model: default_model_spec(),
    }
}
