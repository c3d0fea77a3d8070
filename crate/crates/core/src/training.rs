//! The joint training objective and the optimization loop.
//!
//! Every term is a per-input average over the batch:
//!
//! * classification: cross-entropy of `softmax(-distance)` at the true class,
//!   averaged over inputs and over the sampled prototype sets;
//! * reconstruction: mean squared error between input and decoding;
//! * interpretability: negative log-density of each embedding under its own
//!   class distribution, clipped to `[-1, 1000]`;
//! * KL divergence of the encoder posterior from the standard normal.
//!
//! In the deterministic ablation prototypes are points and the
//! interpretability term becomes the two nearest-neighbour distances between
//! prototypes and embeddings.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::{Bindings, Gradients, Graph, Var};
use crate::model::{Model, ModelConfig, PrototypeMode};
use crate::optim::{AdamConfig, AdamState};
use crate::prototypes::{differentiable_sample, log_density_graph, standard_normal};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;
use crate::vae::{channel_moments, update_running_stats, BackboneConfig, BnTap};

pub const INT_CLIP_LOW: f64 = -1.0;
pub const INT_CLIP_HIGH: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub tau4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { tau1: 1.0, tau2: 10.0, tau3: 0.05, tau4: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Prototype sets drawn per batch for the classification term.
    pub n_train_samples: usize,
    /// Prototype sets drawn per input when scoring the validation split.
    pub n_val_samples: usize,
    pub lr: f64,
    /// Initial Cholesky diagonal of every prototype distribution.
    pub prototype_init_scale: f64,
    pub seed: u64,
    pub mode: PrototypeMode,
    pub backbone: BackboneConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            n_train_samples: 5,
            n_val_samples: 20,
            lr: 1e-3,
            prototype_init_scale: 1.0,
            seed: 0,
            mode: PrototypeMode::Probabilistic,
            backbone: BackboneConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_train_samples == 0 || self.n_val_samples == 0 {
            return Err(Error::invalid("batch_size, n_train_samples and n_val_samples must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.prototype_init_scale > 0.0 && self.prototype_init_scale.is_finite()) {
            return Err(Error::invalid("prototype_init_scale must be positive"));
        }
        let w = self.weights;
        if [w.tau1, w.tau2, w.tau3, w.tau4].iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        self.backbone.validate()
    }

    pub fn model_config(&self, data: &Dataset) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            input_dim: data.input_dim(),
            image_shape: data.image_shape,
            class_count: data.class_count,
            mode: self.mode,
        }
    }
}

/// Loss terms for one batch. `int` is clipped; `int_raw` is not.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub rec: f64,
    pub int: f64,
    pub int_raw: f64,
    pub kl: f64,
}

/// Standard-normal noise consumed by one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossNoise {
    /// `[batch, l]`, used by the reparameterized latent sample.
    pub latent: Tensor,
    /// `[c · draws, l]`, class-major prototype noise.
    pub prototypes: Tensor,
}

impl LossNoise {
    pub fn sample(rng: &mut rng::Rng, batch: usize, class_count: usize, latent_dim: usize, draws: usize) -> Self {
        LossNoise {
            latent: standard_normal(rng, batch, latent_dim),
            prototypes: standard_normal(rng, class_count * draws, latent_dim),
        }
    }

    pub fn zeros(batch: usize, class_count: usize, latent_dim: usize, draws: usize) -> Self {
        LossNoise { latent: Tensor::zeros(&[batch, latent_dim]), prototypes: Tensor::zeros(&[class_count * draws, latent_dim]) }
    }
}

/// The static training graph for a model.
pub struct LossGraph {
    pub graph: Graph,
    pub total: Var,
    pub nll: Var,
    pub rec: Var,
    pub int: Var,
    pub int_raw: Var,
    pub kl: Option<Var>,
    pub taps: Vec<BnTap>,
    pub draws: usize,
}

impl LossGraph {
    pub fn build(model: &Model, weights: LossWeights, draws: usize) -> LossGraph {
        let mut g = Graph::new();
        let x = g.input("x", false);
        let onehot = g.input("onehot", false);
        let backbone = model.backbone();
        let enc = backbone.encoder(&mut g, x);
        let mu = enc.mu;
        let mut taps = enc.taps;

        let (z, kl) = match enc.log_var {
            Some(lv) => {
                let eps = g.input("eps_latent", false);
                let half = g.scale(lv, 0.5);
                let sd = g.exp(half);
                let noise = g.mul(sd, eps);
                let z = g.add(mu, noise);
                let mu2 = g.square(mu);
                let var = g.exp(lv);
                let t = g.sub(lv, mu2);
                let t = g.sub(t, var);
                let t = g.add_scalar(t, 1.0);
                let per_input = g.row_sum(t);
                let m = g.mean(per_input);
                (z, Some(g.scale(m, -0.5)))
            }
            None => (mu, None),
        };
        let dec = backbone.decoder(&mut g, z);
        taps.extend(dec.taps);
        let diff = g.sub(dec.output, x);
        let sq = g.square(diff);
        let rec = g.mean(sq);

        let pv = model.prototype_vars(&mut g);
        let c = pv.class_count;
        let (nll, int_raw) = match model.mode() {
            PrototypeMode::Probabilistic => {
                let onehot_rep = g.input("onehot_rep", false);
                let eps_proto = g.input("eps_proto", false);
                let sets = differentiable_sample(&mut g, pv, eps_proto, draws);
                let d = g.sq_dist(mu, sets);
                let per_draw = g.reshape(d, c);
                let nll = cross_entropy(&mut g, per_draw, onehot_rep);

                let logp = log_density_graph(&mut g, pv, mu);
                let own = g.mul(logp, onehot);
                let own = g.row_sum(own);
                let m = g.mean(own);
                (nll, g.scale(m, -1.0))
            }
            PrototypeMode::Deterministic => {
                let d = g.sq_dist(mu, pv.mean);
                let nll = cross_entropy(&mut g, d, onehot);
                let to_data = g.sq_dist(pv.mean, mu);
                let nearest_input = g.row_min(to_data);
                let r1 = g.mean(nearest_input);
                let nearest_proto = g.row_min(d);
                let r2 = g.mean(nearest_proto);
                (nll, g.add(r1, r2))
            }
        };
        let int = g.clamp(int_raw, INT_CLIP_LOW, INT_CLIP_HIGH);

        let mut terms = vec![g.scale(nll, weights.tau1), g.scale(rec, weights.tau2), g.scale(int, weights.tau3)];
        if let Some(kl) = kl {
            terms.push(g.scale(kl, weights.tau4));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }
        g.label(total, "loss");
        LossGraph { graph: g, total, nll, rec, int, int_raw, kl, taps, draws }
    }
}

fn cross_entropy(g: &mut Graph, distances: Var, onehot: Var) -> Var {
    let logits = g.scale(distances, -1.0);
    let ls = g.log_softmax(logits);
    let picked = g.mul(ls, onehot);
    let per_row = g.row_sum(picked);
    let m = g.mean(per_row);
    g.scale(m, -1.0)
}

/// Non-parameter tensors bound for one batch.
pub struct BatchTensors {
    pub x: Tensor,
    pub onehot: Tensor,
    pub onehot_rep: Tensor,
    pub noise: LossNoise,
}

impl BatchTensors {
    pub fn new(x: Tensor, labels: &[usize], class_count: usize, draws: usize, noise: LossNoise) -> Result<Self> {
        if labels.is_empty() || labels.len() != x.rows() {
            return Err(Error::invalid("batch must be nonempty with one label per input"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::invalid(format!("label {y} outside {class_count} classes")));
        }
        let mut onehot = Tensor::zeros(&[labels.len(), class_count]);
        let mut onehot_rep = Tensor::zeros(&[labels.len() * draws, class_count]);
        for (b, &y) in labels.iter().enumerate() {
            onehot.row_mut(b)[y] = 1.0;
            for k in 0..draws {
                onehot_rep.row_mut(b * draws + k)[y] = 1.0;
            }
        }
        Ok(BatchTensors { x, onehot, onehot_rep, noise })
    }

    pub fn bind<'a>(&'a self, b: &mut Bindings<'a>) {
        b.bind("x", &self.x)
            .bind("onehot", &self.onehot)
            .bind("onehot_rep", &self.onehot_rep)
            .bind("eps_latent", &self.noise.latent)
            .bind("eps_proto", &self.noise.prototypes);
    }
}

/// Loss breakdown, gradients and batch-norm moments for one batch.
pub struct StepResult {
    pub loss: LossBreakdown,
    pub grads: Gradients,
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl LossGraph {
    pub fn evaluate(&self, model: &Model, batch: &BatchTensors, with_grads: bool) -> Result<StepResult> {
        let mut b = Bindings::new();
        model.bind(&mut b);
        batch.bind(&mut b);
        let ev = self.graph.forward(&b)?;
        let item = |v: Var| ev.value(v).item();
        let loss = LossBreakdown {
            total: item(self.total),
            nll: item(self.nll),
            rec: item(self.rec),
            int: item(self.int),
            int_raw: item(self.int_raw),
            kl: self.kl.map_or(0.0, item),
        };
        let grads = if with_grads { ev.backward(self.total)? } else { Gradients::default() };
        let moments = self
            .taps
            .iter()
            .map(|t| {
                let (m, v) = channel_moments(ev.value(t.pre), t.channels);
                (t.prefix.clone(), m, v)
            })
            .collect();
        Ok(StepResult { loss, grads, moments })
    }
}

/// Loss terms for one batch with caller-supplied noise.
pub fn loss(model: &Model, x: &Tensor, labels: &[usize], weights: LossWeights, noise: &LossNoise) -> Result<LossBreakdown> {
    let draws = noise.prototypes.rows() / model.class_count();
    let lg = LossGraph::build(model, weights, draws);
    let batch = BatchTensors::new(x.clone(), labels, model.class_count(), draws, noise.clone())?;
    Ok(lg.evaluate(model, &batch, false)?.loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_nll: f64,
    pub loss_rec: f64,
    pub loss_int: f64,
    pub loss_kl: f64,
    pub val_acc: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,loss_total,loss_nll,loss_rec,loss_int,loss_kl,val_acc";

    /// CSV without wall-clock times, so identical runs give identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.loss_total, r.loss_nll, r.loss_rec, r.loss_int, r.loss_kl, r.val_acc
            );
        }
        s
    }
}

/// Trains a fresh model, keeping the parameters with the best validation
/// accuracy.
pub fn train(config: &TrainConfig, data: &SplitDataset) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    let model = Model::with_prototype_scale(config.model_config(&data.train), config.seed, config.prototype_init_scale)?;
    train_model(model, config, data)
}

/// Trains with point prototypes and the nearest-neighbour interpretability
/// terms, under otherwise identical settings.
pub fn train_deterministic_ablation(config: &TrainConfig, data: &SplitDataset) -> Result<(Model, TrainHistory)> {
    let config = TrainConfig { mode: PrototypeMode::Deterministic, ..config.clone() };
    train(&config, data)
}

/// Continues training `model` in place of a fresh initialization.
pub fn train_model(mut model: Model, config: &TrainConfig, data: &SplitDataset) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    let train = &data.train;
    if train.class_count != model.class_count() || train.input_dim() != model.config().input_dim {
        return Err(Error::invalid("training data does not match the model"));
    }
    let draws = if model.mode() == PrototypeMode::Probabilistic { config.n_train_samples } else { 1 };
    let lg = LossGraph::build(&model, config.weights, draws);
    let mut adam = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() })?;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model)> = None;
    let start = Instant::now();
    let (c, l) = (model.class_count(), model.latent_dim());

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, Purpose::Shuffle, epoch as u64));
        let mut sums = LossBreakdown::default();
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut noise_rng = rng::stream(config.seed, Purpose::TrainNoise, ((epoch as u64) << 32) | batch_index as u64);
            let noise = LossNoise::sample(&mut noise_rng, chunk.len(), c, l, draws);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let batch = BatchTensors::new(train.inputs.select_rows(chunk), &labels, c, draws, noise)?;
            let step = lg.evaluate(&model, &batch, true).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch, batch: batch_index },
                other => other,
            })?;
            if !step.loss.total.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_index });
            }
            adam.step(&mut model.params, &step.grads)?;
            for (prefix, m, v) in &step.moments {
                update_running_stats(&mut model.stats, prefix, m, v)?;
            }
            if !model.params.iter().all(|(_, t)| t.is_finite()) {
                return Err(Error::Divergence { epoch, batch: batch_index });
            }
            let w = chunk.len() as f64;
            sums.total += w * step.loss.total;
            sums.nll += w * step.loss.nll;
            sums.rec += w * step.loss.rec;
            sums.int += w * step.loss.int;
            sums.kl += w * step.loss.kl;
        }
        let n = train.len() as f64;
        let val_acc = eval::evaluate_accuracy(&model, &data.validation, config.n_val_samples, config.seed)?;
        history.records.push(EpochRecord {
            epoch,
            loss_total: sums.total / n,
            loss_nll: sums.nll / n,
            loss_rec: sums.rec / n,
            loss_int: sums.int / n,
            loss_kl: sums.kl / n,
            val_acc,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(acc, _)| val_acc > *acc) {
            best = Some((val_acc, model.clone()));
            history.best_epoch = Some(epoch);
        }
    }
    Ok((best.map_or(model, |(_, m)| m), history))
}
