//! Predictive and explanatory uncertainty.
//!
//! Predictive quantities come from the class probabilities of the sampled
//! passes. Explanatory quantities come from the distance draws: the overlap
//! of distance densities between the winning class and its rivals, and the
//! empirical quantile of the smallest mean distance among training inputs of
//! the same class.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::classifier::PredictiveDistribution;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, Reader};
use crate::numeric::{argmin, entropy};
use crate::prototypes::{sample_set, PrototypeDistribution};
use crate::rng::{self, Purpose, Rng};

pub const REFERENCE_MAGIC: &[u8; 6] = b"PPSREF";
pub const REFERENCE_VERSION: u32 = 1;
/// Evaluation points used when integrating the overlap of two densities.
pub const OVERLAP_GRID: usize = 512;
/// Point masses closer than this coincide.
pub const POINT_MASS_TOLERANCE: f64 = 1e-9;

/// Entropy-based uncertainties, each divided by `ln c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictiveUncertainty {
    pub total: f64,
    pub epistemic_mi: f64,
    pub aleatoric_expected_entropy: f64,
}

/// Total entropy of the mean prediction split into mutual information and
/// expected per-draw entropy.
pub fn predictive_uncertainty(pd: &PredictiveDistribution, c: usize) -> PredictiveUncertainty {
    let draws: Vec<&[f64]> = pd.samples.iter().map(|s| s.probs.as_slice()).collect();
    decompose(&pd.mean_probs, &draws, c)
}

/// Decomposition from the mean probabilities and the per-draw probabilities.
pub fn decompose(mean_probs: &[f64], draws: &[&[f64]], c: usize) -> PredictiveUncertainty {
    let norm = (c as f64).ln();
    let total = entropy(mean_probs) / norm;
    let aleatoric = draws.iter().map(|p| entropy(p)).sum::<f64>() / draws.len() as f64 / norm;
    PredictiveUncertainty { total, epistemic_mi: total - aleatoric, aleatoric_expected_entropy: aleatoric }
}

/// Per-class mean and unbiased variance of the distance draws.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaStatistics {
    pub mean: Vec<f64>,
    /// Absent with fewer than two draws.
    pub variance: Option<Vec<f64>>,
}

impl DeltaStatistics {
    /// Class with the smallest mean distance (lowest index on ties).
    pub fn closest_class(&self) -> usize {
        argmin(&self.mean)
    }
}

pub fn delta_statistics(pd: &PredictiveDistribution) -> DeltaStatistics {
    let draws: Vec<&[f64]> = pd.samples.iter().map(|s| s.delta.as_slice()).collect();
    delta_statistics_of(&draws)
}

pub fn delta_statistics_of(draws: &[&[f64]]) -> DeltaStatistics {
    let n = draws.len();
    let c = draws.first().map_or(0, |d| d.len());
    let mut mean = vec![0.0; c];
    for d in draws {
        for (m, v) in mean.iter_mut().zip(d.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let variance = (n >= 2).then(|| {
        (0..c)
            .map(|i| draws.iter().map(|d| (d[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1) as f64)
            .collect()
    });
    DeltaStatistics { mean, variance }
}

/// A Gaussian kernel density or, for draws without spread, a point mass.
#[derive(Clone, Debug, PartialEq)]
pub enum Density {
    Kernel { samples: Vec<f64>, bandwidth: f64 },
    Point(f64),
}

impl Density {
    /// Silverman's rule `1.06 σ̂ n^(-1/5)` bandwidth; a point mass when the
    /// draws have no spread.
    pub fn fit(samples: &[f64]) -> Density {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = if n >= 2 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let bandwidth = 1.06 * sd * (n as f64).powf(-0.2);
        if !(bandwidth > 0.0) {
            return Density::Point(mean);
        }
        Density::Kernel { samples: samples.to_vec(), bandwidth }
    }

    /// `[min - 3h, max + 3h]`, or the location of a point mass.
    pub fn support(&self) -> (f64, f64) {
        match self {
            Density::Kernel { samples, bandwidth } => {
                let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo - 3.0 * bandwidth, hi + 3.0 * bandwidth)
            }
            Density::Point(x) => (*x, *x),
        }
    }

    /// Density at `x` (zero for a point mass away from its atom).
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Density::Kernel { samples, bandwidth } => {
                let h = *bandwidth;
                let norm = 1.0 / (samples.len() as f64 * h * (2.0 * PI).sqrt());
                norm * samples.iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>()
            }
            Density::Point(_) => 0.0,
        }
    }
}

/// A density tabulated on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Zero for a point mass, whose location is the single grid entry.
    pub bandwidth: f64,
}

impl DensityEstimate {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.values)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|k| if k + 1 == n { hi } else { lo + step * k as f64 }).collect()
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1])).sum()
}

/// Gaussian kernel density estimate of `samples` on `grid_size` points
/// spanning `[min - 3h, max + 3h]`.
pub fn kde(samples: &[f64], grid_size: usize) -> Result<DensityEstimate> {
    if samples.is_empty() || grid_size < 2 {
        return Err(Error::invalid("kde needs samples and at least two grid points"));
    }
    Ok(match Density::fit(samples) {
        Density::Point(x) => DensityEstimate { grid: vec![x], values: vec![f64::INFINITY], bandwidth: 0.0 },
        d @ Density::Kernel { bandwidth, .. } => {
            let (lo, hi) = d.support();
            let grid = linspace(lo, hi, grid_size);
            let values = grid.iter().map(|&x| d.eval(x)).collect();
            DensityEstimate { grid, values, bandwidth }
        }
    })
}

/// `∫ min(f, g)` for two fitted densities. The integrand vanishes outside the
/// common part of both supports, so the grid covers only that interval.
pub fn density_overlap(f: &Density, g: &Density) -> f64 {
    match (f, g) {
        (Density::Point(a), Density::Point(b)) => f64::from(u8::from((a - b).abs() <= POINT_MASS_TOLERANCE)),
        (Density::Point(_), _) | (_, Density::Point(_)) => 0.0,
        _ => {
            let (fl, fh) = f.support();
            let (gl, gh) = g.support();
            let (lo, hi) = (fl.max(gl), fh.min(gh));
            if !(hi > lo) {
                return 0.0;
            }
            let grid = linspace(lo, hi, OVERLAP_GRID);
            let m: Vec<f64> = grid.iter().map(|&x| f.eval(x).min(g.eval(x))).collect();
            trapezoid(&grid, &m).clamp(0.0, 1.0)
        }
    }
}

/// Largest overlap between the distance density of `winner` and that of any
/// other class. `draws[k][i]` is draw `k` of the distance to class `i`.
pub fn aleatoric_overlap_of(draws: &[&[f64]], winner: usize) -> f64 {
    let c = draws.first().map_or(0, |d| d.len());
    let column = |i: usize| -> Vec<f64> { draws.iter().map(|d| d[i]).collect() };
    let top = Density::fit(&column(winner));
    let (top_lo, top_hi) = top.support();
    let mut best: f64 = 0.0;
    for j in (0..c).filter(|&j| j != winner) {
        let other = Density::fit(&column(j));
        let (ol, oh) = other.support();
        if ol > top_hi || oh < top_lo {
            continue;
        }
        best = best.max(density_overlap(&top, &other));
    }
    best.clamp(0.0, 1.0)
}

/// Explanatory aleatoric uncertainty of a prediction.
pub fn aleatoric_overlap(pd: &PredictiveDistribution) -> f64 {
    let draws: Vec<&[f64]> = pd.samples.iter().map(|s| s.delta.as_slice()).collect();
    aleatoric_overlap_of(&draws, pd.predicted_class)
}

/// Sorted per-class mean distances of training inputs to their own class.
#[derive(Clone, Debug, PartialEq)]
pub struct EpistemicReference {
    per_class: Vec<Vec<f64>>,
    pub source_n: usize,
    pub checksum: String,
}

impl EpistemicReference {
    /// Sorts every class array; each must be nonempty.
    pub fn new(mut per_class: Vec<Vec<f64>>, source_n: usize, checksum: String) -> Result<Self> {
        if let Some(i) = per_class.iter().position(Vec::is_empty) {
            return Err(Error::MissingClass(i));
        }
        for v in &mut per_class {
            v.sort_by(f64::total_cmp);
        }
        Ok(EpistemicReference { per_class, source_n, checksum })
    }

    pub fn class_count(&self) -> usize {
        self.per_class.len()
    }

    pub fn values(&self, class: usize) -> &[f64] {
        &self.per_class[class]
    }

    /// Fraction of reference values of `class` that are `<= value`.
    pub fn quantile(&self, class: usize, value: f64) -> f64 {
        let v = &self.per_class[class];
        v.partition_point(|&r| r <= value) as f64 / v.len() as f64
    }

    pub fn verify(&self, model_checksum: &str) -> Result<()> {
        if self.checksum != model_checksum {
            return Err(Error::ChecksumMismatch { expected: self.checksum.clone(), found: model_checksum.to_string() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = REFERENCE_MAGIC.to_vec();
        out.extend_from_slice(&REFERENCE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.source_n as u32).to_le_bytes());
        out.extend_from_slice(&(self.checksum.len() as u32).to_le_bytes());
        out.extend_from_slice(self.checksum.as_bytes());
        out.extend_from_slice(&(self.per_class.len() as u32).to_le_bytes());
        for v in &self.per_class {
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        }
        for v in self.per_class.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != REFERENCE_MAGIC {
            return Err(Error::Format("not an epistemic reference file".into()));
        }
        let version = r.u32()?;
        if version != REFERENCE_VERSION {
            return Err(Error::Format(format!("unsupported reference version {version}")));
        }
        let source_n = r.u32()? as usize;
        let len = r.u32()? as usize;
        let checksum = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("checksum is not UTF-8".into()))?;
        let c = r.u32()? as usize;
        let lens = (0..c).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let per_class = lens
            .iter()
            .map(|&k| (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in reference file".into()));
        }
        EpistemicReference::new(per_class, source_n, checksum)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        EpistemicReference::from_bytes(&fs::read(path)?)
    }
}

/// Mean distance to every class over `n` prototype draws.
pub fn mean_deltas(e: &[f64], dists: &[PrototypeDistribution], n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; dists.len()];
    for k in 0..n {
        let set = sample_set(dists, rng, k)?;
        for (i, m) in mean.iter_mut().enumerate() {
            *m += set.prototype(i).iter().zip(e).map(|(r, x)| (x - r) * (x - r)).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(mean)
}

/// Reference of mean own-class distances over the training inputs. Input `i`
/// uses random stream `i` under `seed`.
pub fn build_reference(train: &Dataset, model: &Model, n: usize, seed: u64) -> Result<EpistemicReference> {
    if n < 1 {
        return Err(Error::invalid("at least one prototype draw is required"));
    }
    let dists = model.prototypes()?;
    let enc = model.encode(&train.inputs)?;
    let mut per_class = vec![Vec::new(); model.class_count()];
    for i in 0..train.len() {
        let y = train.labels[i];
        let mut rng = rng::stream(seed, Purpose::Reference, i as u64);
        let means = mean_deltas(enc.embedding(i), &dists, n, &mut rng)?;
        per_class[y].push(means[y]);
    }
    EpistemicReference::new(per_class, n, model.checksum())
}

/// Explanatory epistemic uncertainty: empirical quantile of the smallest mean
/// distance within the reference of the closest class.
pub fn epistemic_quantile(ds: &DeltaStatistics, reference: &EpistemicReference, model_checksum: &str) -> Result<f64> {
    reference.verify(model_checksum)?;
    if ds.mean.len() != reference.class_count() {
        return Err(Error::invalid("class count differs from the reference"));
    }
    let i = ds.closest_class();
    Ok(reference.quantile(i, ds.mean[i]))
}

/// Epistemic minus aleatoric explanatory uncertainty, unclipped.
pub fn epistemic_only_map(u_e: f64, u_a: f64) -> f64 {
    u_e - u_a
}

/// All uncertainty figures for one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub predictive: PredictiveUncertainty,
    pub u_a: f64,
    pub u_e: f64,
    pub deltas: DeltaStatistics,
}

pub fn uncertainty_report(pd: &PredictiveDistribution, reference: &EpistemicReference, model_checksum: &str) -> Result<UncertaintyReport> {
    let deltas = delta_statistics(pd);
    Ok(UncertaintyReport {
        predictive: predictive_uncertainty(pd, pd.class_count()),
        u_a: aleatoric_overlap(pd),
        u_e: epistemic_quantile(&deltas, reference, model_checksum)?,
        deltas,
    })
}
