//! Fixtures shared by the benchmarks.

use psenn_core::data::Dataset;
use psenn_core::model::{Model, ModelConfig, PrototypeMode};
use psenn_core::prototypes::standard_normal;
use psenn_core::rng;
use psenn_core::vae::{BackboneConfig, BackboneKind};

/// An untrained MNIST-shaped model (784 inputs, 10 classes).
pub fn mnist_shaped_model(latent_dim: usize) -> Model {
    Model::new(
        ModelConfig {
            backbone: BackboneConfig { kind: BackboneKind::Mlp, hidden_sizes: vec![256, 128], latent_dim, variational: true },
            input_dim: 784,
            image_shape: Some((28, 28)),
            class_count: 10,
            mode: PrototypeMode::Probabilistic,
        },
        0,
    )
    .expect("valid config")
}

/// `n` random MNIST-shaped inputs in [-1, 1] with cycling labels.
pub fn mnist_shaped_batch(n: usize) -> Dataset {
    let x = standard_normal(&mut rng::seeded(1), n, 784).map(|v| v.tanh());
    Dataset::new(x, (0..n).map(|i| i % 10).collect(), 10, Some((28, 28))).expect("consistent shapes")
}
