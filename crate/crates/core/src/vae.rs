//! Encoder/decoder backbone with a variational bottleneck.
//!
//! The backbone only describes layer geometry and emits graph fragments;
//! parameters live in a [`ParamStore`] owned by the model. Two layouts exist:
//! a fully connected stack over flattened inputs and a convolutional stack
//! over square single-channel images.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, Var};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LOG_VAR_LIMIT: f64 = 10.0;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Mlp,
    Conv,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Mlp => "mlp",
            BackboneKind::Conv => "conv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mlp" => Some(BackboneKind::Mlp),
            "conv" => Some(BackboneKind::Conv),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Hidden widths for `mlp`; channel counts of the conv stages for `conv`.
    pub hidden_sizes: Vec<usize>,
    pub latent_dim: usize,
    /// `false` selects a plain autoencoder: no sampling and no KL term.
    pub variational: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { kind: BackboneKind::Mlp, hidden_sizes: vec![256, 128], latent_dim: 20, variational: true }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::invalid(format!("latent_dim {} must be at least 2", self.latent_dim)));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden sizes must be positive"));
        }
        if self.kind == BackboneKind::Conv && self.hidden_sizes.is_empty() {
            return Err(Error::invalid("conv backbone needs at least one channel stage"));
        }
        Ok(())
    }
}

/// Encoder statistics for a batch: one row per input.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu: Tensor,
    pub log_var: Tensor,
    pub variational: bool,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The embedding used for distances.
    pub fn embedding(&self, i: usize) -> &[f64] {
        self.mu.row(i)
    }

    /// `mu + exp(log_var / 2) * noise`, or `mu` for a plain autoencoder.
    pub fn reparameterize(&self, i: usize, noise: &[f64]) -> Vec<f64> {
        let mu = self.mu.row(i);
        if !self.variational {
            return mu.to_vec();
        }
        mu.iter()
            .zip(self.log_var.row(i))
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    /// KL divergence of `N(mu, diag(exp(log_var)))` from the standard normal.
    pub fn kl_term(&self, i: usize) -> f64 {
        if !self.variational {
            return 0.0;
        }
        kl_to_standard_normal(self.mu.row(i), self.log_var.row(i))
    }
}

pub fn kl_to_standard_normal(mu: &[f64], log_var: &[f64]) -> f64 {
    let s: f64 = mu.iter().zip(log_var).map(|(m, lv)| 1.0 + lv - m * m - lv.exp()).sum();
    (-0.5 * s).max(0.0)
}

/// A batch-norm layer in the graph: its pre-normalization activations and
/// the names of its running statistics.
#[derive(Clone, Debug)]
pub struct BnTap {
    pub prefix: String,
    pub pre: Var,
    pub channels: usize,
}

pub struct EncoderVars {
    pub mu: Var,
    /// `None` for a plain autoencoder.
    pub log_var: Option<Var>,
    pub taps: Vec<BnTap>,
}

pub struct DecoderVars {
    pub output: Var,
    pub taps: Vec<BnTap>,
}

/// Layer geometry for a backbone bound to a concrete input size.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    input_dim: usize,
    side: usize,
}

impl Backbone {
    pub fn new(config: BackboneConfig, input_dim: usize, image_shape: Option<(usize, usize)>) -> Result<Self> {
        config.validate()?;
        let mut side = 0;
        if config.kind == BackboneKind::Conv {
            let (h, w) = image_shape.ok_or_else(|| Error::invalid("conv backbone needs image inputs"))?;
            let need = 4 << (config.hidden_sizes.len() - 1);
            if h != w || h != need {
                return Err(Error::invalid(format!(
                    "conv backbone with {} stages needs {need}x{need} images, got {h}x{w}",
                    config.hidden_sizes.len()
                )));
            }
            side = h;
        }
        Ok(Backbone { config, input_dim, side })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Conv stages as `(spec, channels)`, outermost first. Stride-2 halving
    /// stages followed by a final 4×4 valid convolution down to 1×1.
    fn conv_stages(&self) -> Vec<ConvSpec> {
        let ch = &self.config.hidden_sizes;
        let mut specs = Vec::new();
        let mut side = self.side;
        let mut in_c = 1;
        for (k, &out_c) in ch.iter().enumerate() {
            let last = k + 1 == ch.len();
            let (stride, padding) = if last { (1, 0) } else { (2, 1) };
            specs.push(ConvSpec { in_channels: in_c, out_channels: out_c, in_h: side, in_w: side, kernel: 4, stride, padding });
            side = if last { 1 } else { side / 2 };
            in_c = out_c;
        }
        specs
    }

    /// Adds every trainable tensor to `params` and running statistics to `stats`.
    pub fn init_params(&self, rng: &mut Rng, params: &mut ParamStore, stats: &mut ParamStore) {
        let l = self.config.latent_dim;
        let mut bn = |prefix: &str, c: usize, params: &mut ParamStore| {
            params.insert(format!("{prefix}.gamma"), Tensor::full(&[1, c], 1.0));
            params.insert(format!("{prefix}.beta"), Tensor::zeros(&[1, c]));
            stats.insert(format!("{prefix}.mean"), Tensor::zeros(&[1, c]));
            stats.insert(format!("{prefix}.var"), Tensor::full(&[1, c], 1.0));
        };
        match self.config.kind {
            BackboneKind::Mlp => {
                let mut fan_in = self.input_dim;
                for (k, &h) in self.config.hidden_sizes.iter().enumerate() {
                    dense(rng, params, &format!("enc.{k}"), fan_in, h);
                    fan_in = h;
                }
                dense(rng, params, "enc.mu", fan_in, l);
                if self.config.variational {
                    dense(rng, params, "enc.logvar", fan_in, l);
                }
                let mut fan_in = l;
                for (k, &h) in self.config.hidden_sizes.iter().rev().enumerate() {
                    dense(rng, params, &format!("dec.{k}"), fan_in, h);
                    fan_in = h;
                }
                dense(rng, params, "dec.out", fan_in, self.input_dim);
            }
            BackboneKind::Conv => {
                let stages = self.conv_stages();
                for (k, s) in stages.iter().enumerate() {
                    let fan_in = s.in_channels * s.kernel * s.kernel;
                    params.insert(format!("enc.conv{k}.w"), uniform(rng, s.out_channels, fan_in, fan_in));
                    params.insert(format!("enc.conv{k}.b"), uniform(rng, 1, s.out_channels, fan_in));
                    bn(&format!("enc.bn{k}"), s.out_channels, params);
                }
                let top = *self.config.hidden_sizes.last().expect("validated");
                dense(rng, params, "enc.mu", top, l);
                if self.config.variational {
                    dense(rng, params, "enc.logvar", top, l);
                }
                dense(rng, params, "dec.in", l, top);
                bn("dec.bn_in", top, params);
                // Transposed stages mirror the encoder, innermost first.
                for (k, s) in stages.iter().rev().enumerate() {
                    let fan_in = s.in_channels * s.kernel * s.kernel;
                    params.insert(format!("dec.deconv{k}.w"), uniform(rng, s.out_channels, s.in_channels * 16, fan_in));
                    params.insert(format!("dec.deconv{k}.b"), uniform(rng, 1, s.in_channels, fan_in));
                    if k + 1 < stages.len() {
                        bn(&format!("dec.bn{k}"), s.in_channels, params);
                    }
                }
            }
        }
    }

    /// Emits the encoder for `x` (`[batch, input_dim]`).
    pub fn encoder(&self, g: &mut Graph, x: Var) -> EncoderVars {
        let mut taps = Vec::new();
        let h = match self.config.kind {
            BackboneKind::Mlp => {
                let mut h = x;
                for k in 0..self.config.hidden_sizes.len() {
                    h = dense_act(g, h, &format!("enc.{k}"));
                }
                h
            }
            BackboneKind::Conv => {
                let mut h = x;
                for (k, s) in self.conv_stages().into_iter().enumerate() {
                    let w = g.input(format!("enc.conv{k}.w"), true);
                    let b = g.input(format!("enc.conv{k}.b"), true);
                    let c = g.conv2d(h, w, b, s);
                    g.label(c, format!("enc.conv{k}"));
                    h = batch_norm(g, c, &format!("enc.bn{k}"), s.out_channels, &mut taps);
                    h = g.leaky_relu(h, LEAKY_SLOPE);
                }
                h
            }
        };
        let mu = dense_linear(g, h, "enc.mu");
        let log_var = self.config.variational.then(|| {
            let raw = dense_linear(g, h, "enc.logvar");
            g.clamp(raw, -LOG_VAR_LIMIT, LOG_VAR_LIMIT)
        });
        EncoderVars { mu, log_var, taps }
    }

    /// Emits the decoder for latent rows `z` (`[batch, latent_dim]`).
    pub fn decoder(&self, g: &mut Graph, z: Var) -> DecoderVars {
        let mut taps = Vec::new();
        let output = match self.config.kind {
            BackboneKind::Mlp => {
                let mut h = z;
                for k in 0..self.config.hidden_sizes.len() {
                    h = dense_act(g, h, &format!("dec.{k}"));
                }
                let out = dense_linear(g, h, "dec.out");
                g.tanh(out)
            }
            BackboneKind::Conv => {
                let stages = self.conv_stages();
                let top = *self.config.hidden_sizes.last().expect("validated");
                let h = dense_linear(g, z, "dec.in");
                let h = batch_norm(g, h, "dec.bn_in", top, &mut taps);
                let mut h = g.leaky_relu(h, LEAKY_SLOPE);
                let n = stages.len();
                for (k, s) in stages.iter().rev().enumerate() {
                    let (oh, ow) = s.conv_out_hw();
                    let spec = ConvSpec {
                        in_channels: s.out_channels,
                        out_channels: s.in_channels,
                        in_h: oh,
                        in_w: ow,
                        kernel: s.kernel,
                        stride: s.stride,
                        padding: s.padding,
                    };
                    let w = g.input(format!("dec.deconv{k}.w"), true);
                    let b = g.input(format!("dec.deconv{k}.b"), true);
                    let c = g.conv_transpose2d(h, w, b, spec);
                    g.label(c, format!("dec.deconv{k}"));
                    h = if k + 1 < n {
                        let bn = batch_norm(g, c, &format!("dec.bn{k}"), s.in_channels, &mut taps);
                        g.leaky_relu(bn, LEAKY_SLOPE)
                    } else {
                        g.tanh(c)
                    };
                }
                h
            }
        };
        DecoderVars { output, taps }
    }
}

fn uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data)
}

fn dense(rng: &mut Rng, params: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    params.insert(format!("{prefix}.w"), uniform(rng, fan_in, fan_out, fan_in));
    params.insert(format!("{prefix}.b"), uniform(rng, 1, fan_out, fan_in));
}

fn dense_linear(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let w = g.input(format!("{prefix}.w"), true);
    let b = g.input(format!("{prefix}.b"), true);
    let y = g.affine(x, w, b);
    g.label(y, prefix)
}

fn dense_act(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let y = dense_linear(g, x, prefix);
    g.leaky_relu(y, LEAKY_SLOPE)
}

fn batch_norm(g: &mut Graph, x: Var, prefix: &str, channels: usize, taps: &mut Vec<BnTap>) -> Var {
    let gamma = g.input(format!("{prefix}.gamma"), true);
    let beta = g.input(format!("{prefix}.beta"), true);
    let mean = g.input(format!("{prefix}.mean"), false);
    let var = g.input(format!("{prefix}.var"), false);
    taps.push(BnTap { prefix: prefix.to_string(), pre: x, channels });
    let y = g.batch_norm(x, gamma, beta, mean, var, channels, BN_EPS);
    g.label(y, prefix)
}

/// Per-channel mean and (biased) variance of a `[batch, channels * spatial]` activation.
pub fn channel_moments(x: &Tensor, channels: usize) -> (Vec<f64>, Vec<f64>) {
    let spatial = x.cols() / channels;
    let count = (x.rows() * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    for r in 0..x.rows() {
        let row = x.row(r);
        for c in 0..channels {
            for &v in &row[c * spatial..(c + 1) * spatial] {
                mean[c] += v;
                sq[c] += v * v;
            }
        }
    }
    for c in 0..channels {
        mean[c] /= count;
        sq[c] = (sq[c] / count - mean[c] * mean[c]).max(0.0);
    }
    (mean, sq)
}

/// Exponential moving average update of running statistics.
pub fn update_running_stats(stats: &mut ParamStore, prefix: &str, mean: &[f64], var: &[f64]) -> Result<()> {
    for (suffix, batch) in [("mean", mean), ("var", var)] {
        let name = format!("{prefix}.{suffix}");
        let t = stats.get_mut(&name).ok_or_else(|| Error::Format(format!("missing statistic {name}")))?;
        for (r, b) in t.data_mut().iter_mut().zip(batch) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
    Ok(())
}
