//! The separable three-blob scenario: configuration, training and the
//! uncertainty probes run against the trained model.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use psenn_core::config::{DatasetSpec, RunConfig, Synth2dSpec};
use psenn_core::data::{Dataset, SplitDataset};
use psenn_core::eval::{accuracy, summarize, InputSummary, SummaryOptions};
use psenn_core::model::{Model, PrototypeMode};
use psenn_core::training::{train, TrainHistory};
use psenn_core::uncertainty::{build_reference, EpistemicReference};
use psenn_core::vae::{BackboneConfig, BackboneKind};
use psenn_core::Tensor;

pub const CENTERS: [[f64; 2]; 3] = [[-0.6, -0.4], [0.6, -0.4], [0.0, 0.6]];
pub const INFER_SAMPLES: usize = 100;

pub fn config(seed: u64, mode: PrototypeMode) -> RunConfig {
    let mut rc = RunConfig::new(DatasetSpec::Synth2d(Synth2dSpec {
        centers: CENTERS.to_vec(),
        n_per_class: 300,
        test_per_class: 300,
        spread: 0.1,
        ood_shift: None,
    }));
    rc.train.backbone = BackboneConfig { kind: BackboneKind::Mlp, hidden_sizes: vec![32, 32], latent_dim: 2, variational: true };
    rc.train.epochs = 30;
    rc.train.batch_size = 32;
    rc.train.lr = 3e-3;
    rc.train.seed = seed;
    rc.train.mode = mode;
    rc
}

pub struct Trained {
    pub config: RunConfig,
    pub data: SplitDataset,
    pub model: Model,
    pub history: TrainHistory,
    pub elapsed: Duration,
}

pub fn trained(seed: u64, mode: PrototypeMode) -> Trained {
    let config = config(seed, mode);
    let data = config.load_split().expect("synthetic data");
    let start = Instant::now();
    let (model, history) = train(&config.train, &data).expect("training");
    Trained { config, data, model, history, elapsed: start.elapsed() }
}

pub fn points(pts: &[[f64; 2]]) -> Dataset {
    let x = Tensor::matrix(pts.len(), 2, pts.iter().flatten().copied().collect());
    Dataset::new(x, vec![0; pts.len()], CENTERS.len(), None).unwrap()
}

pub fn probe(t: &Trained, reference: &EpistemicReference, pts: &[[f64; 2]], seed: u64) -> Vec<InputSummary> {
    let opts = SummaryOptions { reference: Some(reference), aleatoric: true };
    summarize(&t.model, &points(pts), INFER_SAMPLES, seed, opts).unwrap()
}

/// Four points within 0.03 of `at`.
fn around(at: [f64; 2]) -> Vec<[f64; 2]> {
    [[0.0, 0.0], [0.03, 0.0], [0.0, 0.03], [-0.02, -0.02]].iter().map(|d| [at[0] + d[0], at[1] + d[1]]).collect()
}

pub fn center_probes() -> Vec<[f64; 2]> {
    CENTERS.iter().flat_map(|&c| around(c)).collect()
}

pub fn midpoint_probes() -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for i in 0..CENTERS.len() {
        for j in i + 1..CENTERS.len() {
            out.extend(around([(CENTERS[i][0] + CENTERS[j][0]) / 2.0, (CENTERS[i][1] + CENTERS[j][1]) / 2.0]));
        }
    }
    out
}

/// Eight directions at ten times the largest distance between centers.
pub fn far_probes() -> Vec<[f64; 2]> {
    let mut gap: f64 = 0.0;
    for a in &CENTERS {
        for b in &CENTERS {
            gap = gap.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
    }
    (0..8)
        .map(|k| {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            [10.0 * gap * a.cos(), 10.0 * gap * a.sin()]
        })
        .collect()
}

/// One-sample Kolmogorov-Smirnov statistic against U(0, 1).
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub struct Outcome {
    pub train_time: Duration,
    pub test_accuracy: f64,
    pub ks: f64,
    pub center_u_a: f64,
    pub midpoint_u_a: f64,
    pub far_u_e_min: f64,
}

pub fn outcome(t: &Trained) -> Outcome {
    let reference = build_reference(&t.data.train, &t.model, INFER_SAMPLES, 1).unwrap();
    let opts = SummaryOptions { reference: Some(&reference), aleatoric: true };
    let test = summarize(&t.model, &t.data.test, INFER_SAMPLES, 2, opts).unwrap();
    let u_e: Vec<f64> = test.iter().map(|s| s.u_e.unwrap()).collect();
    let u_a = |s: &[InputSummary]| mean(s.iter().map(|s| s.u_a.unwrap()));
    Outcome {
        train_time: t.elapsed,
        test_accuracy: accuracy(&test),
        ks: ks_uniform(&u_e),
        center_u_a: u_a(&probe(t, &reference, &center_probes(), 3)),
        midpoint_u_a: u_a(&probe(t, &reference, &midpoint_probes(), 4)),
        far_u_e_min: probe(t, &reference, &far_probes(), 5).iter().map(|s| s.u_e.unwrap()).fold(1.0, f64::min),
    }
}
