//! The full model: backbone, prototype parameters, batch-norm statistics and
//! the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "PPSENN"  u32 version
//! u8 backbone kind  u8 variational  u8 prototype mode
//! u32 latent_dim  u32 #hidden  u32 hidden[..]
//! u32 input_dim  u8 has_image  u32 height  u32 width  u32 class_count
//! u32 #tensors, then per tensor:
//!   u8 group (0 trainable, 1 running statistic)  u32 name_len  name
//!   u32 rows  u32 cols  f64 values[rows * cols]
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph};
use crate::params::ParamStore;
use crate::prototypes::{diag_raw_for, standard_normal, PrototypeDistribution, PrototypeVars};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;
use crate::vae::{Backbone, BackboneConfig, BackboneKind, EncoderOutput};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PPSENN";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeMode {
    /// One full-covariance Gaussian per class.
    Probabilistic,
    /// One point prototype per class.
    Deterministic,
}

impl PrototypeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PrototypeMode::Probabilistic => "probabilistic",
            PrototypeMode::Deterministic => "deterministic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "probabilistic" => Some(PrototypeMode::Probabilistic),
            "deterministic" => Some(PrototypeMode::Deterministic),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub input_dim: usize,
    pub image_shape: Option<(usize, usize)>,
    pub class_count: usize,
    pub mode: PrototypeMode,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    backbone: Backbone,
    pub params: ParamStore,
    pub stats: ParamStore,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

impl Model {
    /// Freshly initialized model; the same seed always yields the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Model::with_prototype_scale(config, seed, 1.0)
    }

    /// As [`Model::new`], with every prototype Cholesky factor starting at
    /// `scale · I` instead of the identity.
    pub fn with_prototype_scale(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("prototype scale {scale} must be positive")));
        }
        if config.class_count < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        let backbone = Backbone::new(config.backbone.clone(), config.input_dim, config.image_shape)?;
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let mut params = ParamStore::new();
        let mut stats = ParamStore::new();
        backbone.init_params(&mut rng, &mut params, &mut stats);

        let (c, l) = (config.class_count, config.backbone.latent_dim);
        params.insert("proto.mean", standard_normal(&mut rng, c, l).map(|v| 0.1 * v));
        if config.mode == PrototypeMode::Probabilistic {
            let mut raw = Tensor::zeros(&[c, l * l]);
            for i in 0..c {
                for k in 0..l {
                    raw.row_mut(i)[k * l + k] = diag_raw_for(scale);
                }
            }
            params.insert("proto.chol", raw);
        }
        Ok(Model { config, backbone, params, stats })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn latent_dim(&self) -> usize {
        self.config.backbone.latent_dim
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    pub fn mode(&self) -> PrototypeMode {
        self.config.mode
    }

    /// Binds every parameter and running statistic by name.
    pub fn bind<'a>(&'a self, bindings: &mut Bindings<'a>) {
        self.params.bind_all(bindings);
        self.stats.bind_all(bindings);
    }

    /// Graph nodes for the prototype parameters (deterministic models have no
    /// factor node; callers must not request one).
    pub fn prototype_vars(&self, g: &mut Graph) -> PrototypeVars {
        let mean = g.input("proto.mean", true);
        let chol_raw = if self.config.mode == PrototypeMode::Probabilistic {
            g.input("proto.chol", true)
        } else {
            mean
        };
        PrototypeVars { mean, chol_raw, class_count: self.class_count(), dim: self.latent_dim() }
    }

    /// Encoder statistics for every row of `x`.
    pub fn encode(&self, x: &Tensor) -> Result<EncoderOutput> {
        if x.cols() != self.config.input_dim {
            return Err(Error::invalid(format!("input dimension {} does not match model input {}", x.cols(), self.config.input_dim)));
        }
        let mut g = Graph::new();
        let xv = g.input("x", false);
        let enc = self.backbone.encoder(&mut g, xv);
        let l = self.latent_dim();
        let mut mu = Vec::with_capacity(x.rows() * l);
        let mut log_var = Vec::with_capacity(x.rows() * l);
        for start in (0..x.rows()).step_by(CHUNK) {
            let rows: Vec<usize> = (start..(start + CHUNK).min(x.rows())).collect();
            let chunk = x.select_rows(&rows);
            let mut b = Bindings::new();
            self.bind(&mut b);
            b.bind("x", &chunk);
            let ev = g.forward(&b)?;
            mu.extend_from_slice(ev.value(enc.mu).data());
            match enc.log_var {
                Some(lv) => log_var.extend_from_slice(ev.value(lv).data()),
                None => log_var.resize(mu.len(), 0.0),
            }
        }
        Ok(EncoderOutput {
            mu: Tensor::matrix(x.rows(), l, mu),
            log_var: Tensor::matrix(x.rows(), l, log_var),
            variational: self.config.backbone.variational,
        })
    }

    /// Decoded inputs for every latent row of `z`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.latent_dim() {
            return Err(Error::invalid(format!("latent dimension {} does not match model latent {}", z.cols(), self.latent_dim())));
        }
        let mut g = Graph::new();
        let zv = g.input("z", false);
        let dec = self.backbone.decoder(&mut g, zv);
        let d = self.config.input_dim;
        let mut out = Vec::with_capacity(z.rows() * d);
        for start in (0..z.rows()).step_by(CHUNK) {
            let rows: Vec<usize> = (start..(start + CHUNK).min(z.rows())).collect();
            let chunk = z.select_rows(&rows);
            let mut b = Bindings::new();
            self.bind(&mut b);
            b.bind("z", &chunk);
            out.extend_from_slice(g.forward(&b)?.value(dec.output).data());
        }
        Ok(Tensor::matrix(z.rows(), d, out))
    }

    /// The current per-class prototype distributions.
    pub fn prototypes(&self) -> Result<Vec<PrototypeDistribution>> {
        let means = self.params.require("proto.mean")?;
        match self.config.mode {
            PrototypeMode::Probabilistic => {
                let raw = self.params.require("proto.chol")?;
                (0..self.class_count())
                    .map(|i| PrototypeDistribution::from_raw(i, means.row(i).to_vec(), raw.row(i)))
                    .collect()
            }
            PrototypeMode::Deterministic => {
                Ok((0..self.class_count()).map(|i| PrototypeDistribution::point(i, means.row(i).to_vec())).collect())
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let c = &self.config;
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.push(match c.backbone.kind {
            BackboneKind::Mlp => 0,
            BackboneKind::Conv => 1,
        });
        out.push(u8::from(c.backbone.variational));
        out.push(match c.mode {
            PrototypeMode::Probabilistic => 0,
            PrototypeMode::Deterministic => 1,
        });
        put_u32(&mut out, c.backbone.latent_dim as u32);
        put_u32(&mut out, c.backbone.hidden_sizes.len() as u32);
        for &h in &c.backbone.hidden_sizes {
            put_u32(&mut out, h as u32);
        }
        put_u32(&mut out, c.input_dim as u32);
        let (h, w) = c.image_shape.unwrap_or((0, 0));
        out.push(u8::from(c.image_shape.is_some()));
        put_u32(&mut out, h as u32);
        put_u32(&mut out, w as u32);
        put_u32(&mut out, c.class_count as u32);
        put_u32(&mut out, (self.params.len() + self.stats.len()) as u32);
        for (group, store) in [(0u8, &self.params), (1u8, &self.stats)] {
            for (name, t) in store.iter() {
                out.push(group);
                put_u32(&mut out, name.len() as u32);
                out.extend_from_slice(name.as_bytes());
                put_u32(&mut out, t.rows() as u32);
                put_u32(&mut out, t.cols() as u32);
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(6)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("checkpoint magic {:?}", String::from_utf8_lossy(magic))));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = match r.u8()? {
            0 => BackboneKind::Mlp,
            1 => BackboneKind::Conv,
            k => return Err(Error::Format(format!("unknown backbone kind {k}"))),
        };
        let variational = r.u8()? != 0;
        let mode = match r.u8()? {
            0 => PrototypeMode::Probabilistic,
            1 => PrototypeMode::Deterministic,
            m => return Err(Error::Format(format!("unknown prototype mode {m}"))),
        };
        let latent_dim = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        let hidden_sizes = (0..n_hidden).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let input_dim = r.u32()? as usize;
        let has_image = r.u8()? != 0;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        let class_count = r.u32()? as usize;
        let config = ModelConfig {
            backbone: BackboneConfig { kind, hidden_sizes, latent_dim, variational },
            input_dim,
            image_shape: has_image.then_some((h, w)),
            class_count,
            mode,
        };
        let backbone = Backbone::new(config.backbone.clone(), input_dim, config.image_shape)?;
        let mut params = ParamStore::new();
        let mut stats = ParamStore::new();
        let count = r.u32()? as usize;
        for _ in 0..count {
            let group = r.u8()?;
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let raw = r.take(rows * cols * 8)?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            let t = Tensor::matrix(rows, cols, data);
            match group {
                0 => params.insert(name, t),
                1 => stats.insert(name, t),
                g => return Err(Error::Format(format!("unknown tensor group {g}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        let model = Model { config, backbone, params, stats };
        model.check_complete()?;
        Ok(model)
    }

    /// Verifies that every tensor a freshly built model would own is present
    /// with the right shape.
    fn check_complete(&self) -> Result<()> {
        let reference = Model::new(self.config.clone(), 0)?;
        for (store, expected) in [(&self.params, &reference.params), (&self.stats, &reference.stats)] {
            if store.len() != expected.len() {
                return Err(Error::Format(format!("checkpoint holds {} tensors in a group that needs {}", store.len(), expected.len())));
            }
            for (name, t) in expected.iter() {
                let got = store.require(name)?;
                if got.shape() != t.shape() {
                    return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {:?}", got.shape(), t.shape())));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub fn checksum(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated { expected: end, actual: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
