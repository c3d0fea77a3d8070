use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use psenn_bench::{mnist_shaped_batch, mnist_shaped_model};
use psenn_core::classifier::predict_embedding;
use psenn_core::eval::{summarize, SummaryOptions};
use psenn_core::optim::{AdamConfig, AdamState};
use psenn_core::rng;
use psenn_core::training::{BatchTensors, LossGraph, LossNoise, LossWeights};
use psenn_core::uncertainty::{aleatoric_overlap, build_reference};

fn training_step(c: &mut Criterion) {
    let model = mnist_shaped_model(20);
    let data = mnist_shaped_batch(32);
    let lg = LossGraph::build(&model, LossWeights::default(), 5);
    let noise = LossNoise::sample(&mut rng::seeded(0), 32, 10, 20, 5);
    let batch = BatchTensors::new(data.inputs.clone(), &data.labels, 10, 5, noise).unwrap();
    c.bench_function("loss_forward_backward_b32", |b| b.iter(|| black_box(lg.evaluate(&model, &batch, true).unwrap())));
    c.bench_function("adam_step_b32", |b| {
        b.iter_batched(
            || (model.clone(), lg.evaluate(&model, &batch, true).unwrap().grads),
            |(mut m, grads)| {
                let mut adam = AdamState::new(AdamConfig::default()).unwrap();
                adam.step(&mut m.params, &grads).unwrap();
                m
            },
            BatchSize::LargeInput,
        )
    });
}

fn inference(c: &mut Criterion) {
    let model = mnist_shaped_model(20);
    let data = mnist_shaped_batch(64);
    let dists = model.prototypes().unwrap();
    let e = model.encode(&data.inputs).unwrap();
    c.bench_function("predict_embedding_n100", |b| {
        b.iter(|| black_box(predict_embedding(e.embedding(0), &dists, 100, &mut rng::seeded(3)).unwrap()))
    });
    let pd = predict_embedding(e.embedding(0), &dists, 100, &mut rng::seeded(3)).unwrap();
    c.bench_function("aleatoric_overlap_n100_c10", |b| b.iter(|| black_box(aleatoric_overlap(&pd))));
    let reference = build_reference(&data, &model, 20, 0).unwrap();
    let opts = SummaryOptions { reference: Some(&reference), aleatoric: true };
    c.bench_function("summarize_64_inputs_n100", |b| b.iter(|| black_box(summarize(&model, &data, 100, 0, opts).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = training_step, inference
}
criterion_main!(benches);
