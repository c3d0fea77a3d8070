//! Finite-difference check of the full training loss on tiny models.

#![allow(dead_code)]

use psenn_core::model::{Model, ModelConfig, PrototypeMode};
use psenn_core::rng;
use psenn_core::training::{BatchTensors, LossGraph, LossNoise, LossWeights};
use psenn_core::vae::{BackboneConfig, BackboneKind};
use psenn_core::{gradient_check, Bindings, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct LossCase {
    pub name: &'static str,
    pub kind: BackboneKind,
    pub hidden: &'static [usize],
    pub variational: bool,
    pub mode: PrototypeMode,
}

pub fn cases() -> Vec<LossCase> {
    use BackboneKind::*;
    use PrototypeMode::*;
    vec![
        LossCase { name: "mlp-vae-probabilistic", kind: Mlp, hidden: &[5, 4], variational: true, mode: Probabilistic },
        LossCase { name: "mlp-ae-probabilistic", kind: Mlp, hidden: &[5], variational: false, mode: Probabilistic },
        LossCase { name: "mlp-vae-deterministic", kind: Mlp, hidden: &[5], variational: true, mode: Deterministic },
        LossCase { name: "conv-vae-probabilistic", kind: Conv, hidden: &[2, 3], variational: true, mode: Probabilistic },
    ]
}

/// Worst relative gradient error of the total loss over every parameter
/// (encoder, decoder, prototype means and Cholesky factors), batch of 4,
/// latent dimension 2, three classes.
pub fn max_error(case: &LossCase, points: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let mut r = ChaCha8Rng::seed_from_u64(seed + p as u64);
        let (input_dim, image_shape) = match case.kind {
            BackboneKind::Mlp => (3, None),
            BackboneKind::Conv => (64, Some((8, 8))),
        };
        let config = ModelConfig {
            backbone: BackboneConfig { kind: case.kind, hidden_sizes: case.hidden.to_vec(), latent_dim: 2, variational: case.variational },
            input_dim,
            image_shape,
            class_count: 3,
            mode: case.mode,
        };
        let mut model = Model::new(config, seed + p as u64).expect("model");
        // Spread prototypes and factors so no term sits at a clip boundary.
        for v in model.params.get_mut("proto.mean").unwrap().data_mut() {
            *v = r.random_range(-1.5..1.5);
        }
        if let Some(ch) = model.params.get_mut("proto.chol") {
            for v in ch.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        for (_, t) in model.stats.iter_mut() {
            for v in t.data_mut() {
                *v += r.random_range(0.0..0.5);
            }
        }
        let x = Tensor::matrix(4, input_dim, (0..4 * input_dim).map(|_| r.random_range(-1.0..1.0)).collect());
        let labels = [0, 1, 2, 1];
        let draws = 2;
        let noise = LossNoise::sample(&mut rng::seeded(seed + p as u64), 4, 3, 2, draws);
        let lg = LossGraph::build(&model, LossWeights::default(), draws);
        let batch = BatchTensors::new(x, &labels, 3, draws, noise).expect("batch");
        let mut b = Bindings::new();
        model.bind(&mut b);
        batch.bind(&mut b);
        let err = gradient_check(&lg.graph, &b, lg.total, 1e-6).expect("gradient check");
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    worst
}
