//! Run configuration: a TOML subset with fixed sections, strict keys and
//! documented defaults.
//!
//! ```toml
//! seed = 0
//! out = "runs/mnist"
//!
//! [data]
//! kind = "idx"                 # or "synth2d"
//! train_images = "data/mnist/train-images-idx3-ubyte"
//! train_labels = "data/mnist/train-labels-idx1-ubyte"
//! test_images = "data/mnist/t10k-images-idx3-ubyte"
//! test_labels = "data/mnist/t10k-labels-idx1-ubyte"
//! ood_images = "data/fashion/t10k-images-idx3-ubyte"   # optional
//! ood_labels = "data/fashion/t10k-labels-idx1-ubyte"   # optional
//! target_side = 28
//! train_limit = 10000          # optional, first n images
//! test_limit = 2000            # optional
//! validation_fraction = 0.1
//!
//! [model]
//! backbone = "mlp"             # or "conv"
//! hidden = [256, 128]
//! latent_dim = 20
//! variational = true
//! mode = "probabilistic"       # or "deterministic"
//! prototype_init_scale = 1.0   # initial Cholesky diagonal of every prototype
//!
//! [train]
//! epochs = 100
//! batch_size = 128
//! n_train_samples = 5
//! n_val_samples = 20
//! lr = 0.001
//!
//! [loss]
//! tau1 = 1.0
//! tau2 = 10.0
//! tau3 = 0.05
//! tau4 = 0.05
//!
//! [inference]
//! n_infer_samples = 100
//! ```
//!
//! A synth2d `[data]` section takes `centers` (array of `[x, y]`),
//! `n_per_class`, `test_per_class`, `spread` and an optional `ood_shift`
//! (`[dx, dy]`) instead of file paths. Relative paths are resolved against
//! the directory of the config file when loaded with [`load_config`].

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use toml::de::{DeTable, DeValue};
use toml::Spanned;

use crate::data::{self, Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::model::PrototypeMode;
use crate::training::{LossWeights, TrainConfig};
use crate::vae::{BackboneConfig, BackboneKind};

#[derive(Clone, Debug, PartialEq)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub ood: Option<(PathBuf, PathBuf)>,
    pub target_side: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synth2dSpec {
    pub centers: Vec<[f64; 2]>,
    pub n_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub ood_shift: Option<[f64; 2]>,
}

impl Default for Synth2dSpec {
    fn default() -> Self {
        Synth2dSpec {
            centers: vec![[-0.6, -0.4], [0.6, -0.4], [0.0, 0.6]],
            n_per_class: 200,
            test_per_class: 100,
            spread: 0.1,
            ood_shift: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Idx(IdxSpec),
    Synth2d(Synth2dSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub validation_fraction: f64,
    pub train: TrainConfig,
    pub n_infer_samples: usize,
    pub out_dir: PathBuf,
}

pub const DEFAULT_INFER_SAMPLES: usize = 100;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;

impl RunConfig {
    pub fn new(data: DatasetSpec) -> Self {
        RunConfig {
            data,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            train: TrainConfig::default(),
            n_infer_samples: DEFAULT_INFER_SAMPLES,
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Training, validation and test data as configured.
    pub fn load_split(&self) -> Result<SplitDataset> {
        let (train, test) = match &self.data {
            DatasetSpec::Idx(s) => {
                let mut train = data::load_idx(&s.train_images, &s.train_labels)?;
                let mut test = data::load_idx(&s.test_images, &s.test_labels)?;
                if let Some(n) = s.train_limit {
                    train = train.take(n);
                }
                if let Some(n) = s.test_limit {
                    test = test.take(n);
                }
                let train = data::preprocess(&train, s.target_side)?;
                let mut test = data::preprocess(&test, s.target_side)?;
                test.class_count = test.class_count.max(train.class_count);
                (train, test)
            }
            DatasetSpec::Synth2d(s) => {
                let per = s.n_per_class + s.test_per_class;
                let all = data::synth2d(s.centers.len(), per, &s.centers, s.spread, self.seed())?;
                let (mut tr, mut te) = (Vec::new(), Vec::new());
                for k in 0..s.centers.len() {
                    tr.extend(k * per..k * per + s.n_per_class);
                    te.extend(k * per + s.n_per_class..(k + 1) * per);
                }
                (all.subset(&tr)?, all.subset(&te)?)
            }
        };
        SplitDataset::from_training(&train, test, self.validation_fraction, self.seed())
    }

    /// The out-of-distribution test set, if one is configured.
    pub fn load_ood(&self) -> Result<Option<Dataset>> {
        match &self.data {
            DatasetSpec::Idx(s) => match &s.ood {
                Some((images, labels)) => {
                    let mut raw = data::load_idx(images, labels)?;
                    if let Some(n) = s.test_limit {
                        raw = raw.take(n);
                    }
                    Ok(Some(data::preprocess(&raw, s.target_side)?))
                }
                None => Ok(None),
            },
            DatasetSpec::Synth2d(s) => match s.ood_shift {
                Some(shift) => Ok(Some(self.load_split()?.test.translated(&shift)?)),
                None => Ok(None),
            },
        }
    }
}

struct Doc<'a> {
    text: &'a str,
}

impl Doc<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        self.text[..span.start.min(self.text.len())].matches('\n').count() + 1
    }

    fn err(&self, span: Range<usize>, key: &str, message: impl Into<String>) -> Error {
        Error::Config { line: self.line(span), key: key.to_string(), message: message.into() }
    }
}

type Entry<'i> = (&'i Spanned<std::borrow::Cow<'i, str>>, &'i Spanned<DeValue<'i>>);

/// Keys of one table with the entries consumed so far, so leftovers can be
/// reported as unknown.
struct Section<'d, 'i> {
    doc: &'d Doc<'d>,
    name: &'static str,
    entries: Vec<Entry<'i>>,
}

impl<'d, 'i> Section<'d, 'i> {
    fn new(doc: &'d Doc<'d>, name: &'static str, table: &'i DeTable<'i>) -> Self {
        let mut entries: Vec<Entry<'i>> = table.iter().collect();
        entries.sort_by_key(|(k, _)| k.span().start);
        Section { doc, name, entries }
    }

    fn qualified(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.name)
        }
    }

    fn take(&mut self, key: &str) -> Option<(String, Range<usize>, &'i DeValue<'i>)> {
        let pos = self.entries.iter().position(|(k, _)| k.get_ref().as_ref() == key)?;
        let (_, v) = self.entries.remove(pos);
        Some((self.qualified(key), v.span(), v.get_ref()))
    }

    fn table(&mut self, key: &'static str) -> Result<Option<&'i DeTable<'i>>> {
        match self.take(key) {
            None => Ok(None),
            Some((q, span, v)) => v.as_table().map(Some).ok_or_else(|| self.doc.err(span, &q, "expected a section")),
        }
    }

    fn float(&mut self, key: &str, default: f64, ok: impl Fn(f64) -> bool, range: &str) -> Result<f64> {
        let Some((q, span, v)) = self.take(key) else { return Ok(default) };
        let x = number(v).ok_or_else(|| self.doc.err(span.clone(), &q, format!("expected a number, found {}", v.type_str())))?;
        if !ok(x) {
            return Err(self.doc.err(span, &q, format!("value {x} out of range: {range}")));
        }
        Ok(x)
    }

    fn int(&mut self, key: &str, default: u64, min: u64) -> Result<u64> {
        Ok(self.opt_int(key, min)?.unwrap_or(default))
    }

    fn opt_int(&mut self, key: &str, min: u64) -> Result<Option<u64>> {
        let Some((q, span, v)) = self.take(key) else { return Ok(None) };
        let i = integer(v).ok_or_else(|| self.doc.err(span.clone(), &q, format!("expected an integer, found {}", v.type_str())))?;
        if i < min as i128 || i > u64::MAX as i128 {
            return Err(self.doc.err(span, &q, format!("value {i} out of range: must be at least {min}")));
        }
        Ok(Some(i as u64))
    }

    fn boolean(&mut self, key: &str, default: bool) -> Result<bool> {
        let Some((q, span, v)) = self.take(key) else { return Ok(default) };
        v.as_bool().ok_or_else(|| self.doc.err(span, &q, format!("expected a boolean, found {}", v.type_str())))
    }

    fn string(&mut self, key: &str) -> Result<Option<(String, Range<usize>, String)>> {
        let Some((q, span, v)) = self.take(key) else { return Ok(None) };
        match v.as_str() {
            Some(s) => Ok(Some((q, span, s.to_string()))),
            None => Err(self.doc.err(span, &q, format!("expected a string, found {}", v.type_str()))),
        }
    }

    fn floats(&mut self, key: &str) -> Result<Option<(String, Range<usize>, Vec<f64>)>> {
        let Some((q, span, v)) = self.take(key) else { return Ok(None) };
        let values = v
            .as_array()
            .and_then(|a| a.iter().map(|x| number(x.get_ref())).collect::<Option<Vec<_>>>())
            .ok_or_else(|| self.doc.err(span.clone(), &q, "expected an array of numbers"))?;
        Ok(Some((q, span, values)))
    }

    fn finish(self) -> Result<()> {
        match self.entries.first() {
            None => Ok(()),
            Some((k, _)) => {
                let key = self.qualified(k.get_ref());
                Err(self.doc.err(k.span(), &key, "unknown key"))
            }
        }
    }
}

fn integer(v: &DeValue<'_>) -> Option<i128> {
    let i = v.as_integer()?;
    i128::from_str_radix(&i.as_str().replace('_', ""), i.radix()).ok()
}

fn number(v: &DeValue<'_>) -> Option<f64> {
    if let Some(f) = v.as_float() {
        let s = f.as_str().replace('_', "");
        return match s.as_str() {
            "inf" | "+inf" => Some(f64::INFINITY),
            "-inf" => Some(f64::NEG_INFINITY),
            "nan" | "+nan" | "-nan" => Some(f64::NAN),
            _ => s.parse().ok(),
        };
    }
    integer(v).map(|i| i as f64)
}

fn pair(doc: &Doc<'_>, q: &str, span: Range<usize>, values: &[f64]) -> Result<[f64; 2]> {
    match values {
        [x, y] if x.is_finite() && y.is_finite() => Ok([*x, *y]),
        _ => Err(doc.err(span, q, "expected two finite numbers")),
    }
}

fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    match base {
        Some(b) if p.is_relative() && !b.as_os_str().is_empty() => b.join(p),
        _ => p,
    }
}

fn parse_data(doc: &Doc<'_>, s: &mut Section<'_, '_>, base: Option<&Path>) -> Result<(DatasetSpec, f64)> {
    let kind = s.string("kind")?;
    let fraction = s.float("validation_fraction", DEFAULT_VALIDATION_FRACTION, |f| f > 0.0 && f < 1.0, "(0, 1)")?;
    let spec = match kind.as_ref().map(|(_, _, k)| k.as_str()) {
        Some("idx") | None => {
            let mut path = |key: &str, required: bool| -> Result<Option<PathBuf>> {
                match s.string(key)? {
                    Some((q, span, p)) => {
                        let path = resolve(base, &p);
                        if !path.exists() {
                            return Err(doc.err(span, &q, format!("file {} does not exist", path.display())));
                        }
                        Ok(Some(path))
                    }
                    None if required => Err(Error::Config { line: 0, key: format!("data.{key}"), message: "missing required key".into() }),
                    None => Ok(None),
                }
            };
            let train_images = path("train_images", true)?.expect("required");
            let train_labels = path("train_labels", true)?.expect("required");
            let test_images = path("test_images", true)?.expect("required");
            let test_labels = path("test_labels", true)?.expect("required");
            let ood = match (path("ood_images", false)?, path("ood_labels", false)?) {
                (Some(i), Some(l)) => Some((i, l)),
                (None, None) => None,
                _ => {
                    return Err(Error::Config {
                        line: 0,
                        key: "data.ood_images".into(),
                        message: "ood_images and ood_labels must be given together".into(),
                    })
                }
            };
            DatasetSpec::Idx(IdxSpec {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ood,
                target_side: s.int("target_side", 28, 1)? as usize,
                train_limit: s.opt_int("train_limit", 1)?.map(|n| n as usize),
                test_limit: s.opt_int("test_limit", 1)?.map(|n| n as usize),
            })
        }
        Some("synth2d") => {
            let d = Synth2dSpec::default();
            let centers = match s.take("centers") {
                None => d.centers,
                Some((q, span, v)) => {
                    let rows = v.as_array().ok_or_else(|| doc.err(span.clone(), &q, "expected an array of [x, y] pairs"))?;
                    let centers = rows
                        .iter()
                        .map(|r| {
                            let vals = r
                                .get_ref()
                                .as_array()
                                .and_then(|a| a.iter().map(|x| number(x.get_ref())).collect::<Option<Vec<_>>>())
                                .unwrap_or_default();
                            pair(doc, &q, r.span(), &vals)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if centers.len() < 2 {
                        return Err(doc.err(span, &q, "need at least two centers"));
                    }
                    centers
                }
            };
            let ood_shift = match s.floats("ood_shift")? {
                Some((q, span, v)) => Some(pair(doc, &q, span, &v)?),
                None => None,
            };
            DatasetSpec::Synth2d(Synth2dSpec {
                centers,
                n_per_class: s.int("n_per_class", d.n_per_class as u64, 2)? as usize,
                test_per_class: s.int("test_per_class", d.test_per_class as u64, 1)? as usize,
                spread: s.float("spread", d.spread, |x| x > 0.0 && x.is_finite(), "must be positive")?,
                ood_shift,
            })
        }
        Some(other) => {
            let (q, span, _) = kind.as_ref().expect("matched Some");
            return Err(doc.err(span.clone(), q, format!("unknown dataset kind `{other}` (idx or synth2d)")));
        }
    };
    Ok((spec, fraction))
}

fn parse_with_base(text: &str, base: Option<&Path>) -> Result<RunConfig> {
    let doc = Doc { text };
    let root = DeTable::parse(text).map_err(|e| Error::Config {
        line: e.span().map_or(0, |s| doc.line(s)),
        key: String::new(),
        message: e.message().to_string(),
    })?;
    let root_table = root.get_ref();
    let mut top = Section::new(&doc, "", root_table);
    let seed = top.int("seed", 0, 0)?;
    let out_dir = top.string("out")?.map_or_else(|| PathBuf::from("out"), |(_, _, p)| resolve(base, &p));

    let empty = DeTable::default();
    let data_t = top.table("data")?;
    let model_t = top.table("model")?.unwrap_or(&empty);
    let train_t = top.table("train")?.unwrap_or(&empty);
    let loss_t = top.table("loss")?.unwrap_or(&empty);
    let infer_t = top.table("inference")?.unwrap_or(&empty);
    top.finish()?;

    let data_t = data_t.ok_or_else(|| Error::Config { line: 0, key: "data".into(), message: "missing [data] section".into() })?;
    let mut s = Section::new(&doc, "data", data_t);
    let (data, validation_fraction) = parse_data(&doc, &mut s, base)?;
    s.finish()?;

    let defaults = TrainConfig::default();
    let mut s = Section::new(&doc, "model", model_t);
    let kind = match s.string("backbone")? {
        None => defaults.backbone.kind,
        Some((q, span, k)) => BackboneKind::parse(&k).ok_or_else(|| doc.err(span, &q, format!("unknown backbone `{k}` (mlp or conv)")))?,
    };
    let hidden_sizes = match s.take("hidden") {
        None => defaults.backbone.hidden_sizes.clone(),
        Some((q, span, v)) => v
            .as_array()
            .and_then(|a| a.iter().map(|x| integer(x.get_ref()).filter(|&i| i >= 1).map(|i| i as usize)).collect::<Option<Vec<_>>>())
            .ok_or_else(|| doc.err(span, &q, "expected an array of positive integers"))?,
    };
    let latent_dim = s.int("latent_dim", defaults.backbone.latent_dim as u64, 2)? as usize;
    let variational = s.boolean("variational", defaults.backbone.variational)?;
    let mode = match s.string("mode")? {
        None => defaults.mode,
        Some((q, span, m)) => {
            PrototypeMode::parse(&m).ok_or_else(|| doc.err(span, &q, format!("unknown mode `{m}` (probabilistic or deterministic)")))?
        }
    };
    let prototype_init_scale =
        s.float("prototype_init_scale", defaults.prototype_init_scale, |x| x > 0.0 && x.is_finite(), "must be positive")?;
    s.finish()?;

    let mut s = Section::new(&doc, "train", train_t);
    let epochs = s.int("epochs", defaults.epochs as u64, 0)? as usize;
    let batch_size = s.int("batch_size", defaults.batch_size as u64, 1)? as usize;
    let n_train_samples = s.int("n_train_samples", defaults.n_train_samples as u64, 1)? as usize;
    let n_val_samples = s.int("n_val_samples", defaults.n_val_samples as u64, 1)? as usize;
    let lr = s.float("lr", defaults.lr, |x| x > 0.0 && x.is_finite(), "must be positive")?;
    s.finish()?;

    let mut s = Section::new(&doc, "loss", loss_t);
    let d = LossWeights::default();
    let nonneg = |x: f64| x >= 0.0 && x.is_finite();
    let weights = LossWeights {
        tau1: s.float("tau1", d.tau1, nonneg, "must be nonnegative")?,
        tau2: s.float("tau2", d.tau2, nonneg, "must be nonnegative")?,
        tau3: s.float("tau3", d.tau3, nonneg, "must be nonnegative")?,
        tau4: s.float("tau4", d.tau4, nonneg, "must be nonnegative")?,
    };
    s.finish()?;

    let mut s = Section::new(&doc, "inference", infer_t);
    let n_infer_samples = s.int("n_infer_samples", DEFAULT_INFER_SAMPLES as u64, 1)? as usize;
    s.finish()?;

    let train = TrainConfig {
        epochs,
        batch_size,
        n_train_samples,
        n_val_samples,
        lr,
        prototype_init_scale,
        seed,
        mode,
        backbone: BackboneConfig { kind, hidden_sizes, latent_dim, variational },
        weights,
    };
    train.validate().map_err(|e| Error::Config { line: 0, key: "model".into(), message: e.to_string() })?;
    Ok(RunConfig { data, validation_fraction, train, n_infer_samples, out_dir })
}

/// Parses config text; relative paths are taken relative to the working directory.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_with_base(text, None)
}

/// Reads and parses a config file, resolving relative paths against its directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_with_base(&text, path.parent())
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn path_str(p: &Path) -> String {
    quote(&p.to_string_lossy())
}

fn float(x: f64) -> String {
    format!("{x:?}")
}

/// Renders a config that [`parse_config`] reads back unchanged.
pub fn render_config(c: &RunConfig) -> String {
    let mut s = String::new();
    let t = &c.train;
    let _ = writeln!(s, "seed = {}\nout = {}\n\n[data]", t.seed, path_str(&c.out_dir));
    match &c.data {
        DatasetSpec::Idx(d) => {
            let _ = writeln!(s, "kind = \"idx\"");
            for (k, p) in [
                ("train_images", &d.train_images),
                ("train_labels", &d.train_labels),
                ("test_images", &d.test_images),
                ("test_labels", &d.test_labels),
            ] {
                let _ = writeln!(s, "{k} = {}", path_str(p));
            }
            if let Some((i, l)) = &d.ood {
                let _ = writeln!(s, "ood_images = {}\nood_labels = {}", path_str(i), path_str(l));
            }
            let _ = writeln!(s, "target_side = {}", d.target_side);
            if let Some(n) = d.train_limit {
                let _ = writeln!(s, "train_limit = {n}");
            }
            if let Some(n) = d.test_limit {
                let _ = writeln!(s, "test_limit = {n}");
            }
        }
        DatasetSpec::Synth2d(d) => {
            let centers: Vec<String> = d.centers.iter().map(|[x, y]| format!("[{}, {}]", float(*x), float(*y))).collect();
            let _ = writeln!(
                s,
                "kind = \"synth2d\"\ncenters = [{}]\nn_per_class = {}\ntest_per_class = {}\nspread = {}",
                centers.join(", "),
                d.n_per_class,
                d.test_per_class,
                float(d.spread)
            );
            if let Some([x, y]) = d.ood_shift {
                let _ = writeln!(s, "ood_shift = [{}, {}]", float(x), float(y));
            }
        }
    }
    let b = &t.backbone;
    let hidden: Vec<String> = b.hidden_sizes.iter().map(|h| h.to_string()).collect();
    let w = t.weights;
    let _ = write!(
        s,
        "validation_fraction = {}\n\n[model]\nbackbone = \"{}\"\nhidden = [{}]\nlatent_dim = {}\nvariational = {}\nmode = \"{}\"\nprototype_init_scale = {}\n\n\
         [train]\nepochs = {}\nbatch_size = {}\nn_train_samples = {}\nn_val_samples = {}\nlr = {}\n\n\
         [loss]\ntau1 = {}\ntau2 = {}\ntau3 = {}\ntau4 = {}\n\n[inference]\nn_infer_samples = {}\n",
        float(c.validation_fraction),
        b.kind.as_str(),
        hidden.join(", "),
        b.latent_dim,
        b.variational,
        t.mode.as_str(),
        float(t.prototype_init_scale),
        t.epochs,
        t.batch_size,
        t.n_train_samples,
        t.n_val_samples,
        float(t.lr),
        float(w.tau1),
        float(w.tau2),
        float(w.tau3),
        float(w.tau4),
        c.n_infer_samples
    );
    s
}
