//! Per-class Gaussian prototype distributions over the latent space.
//!
//! Each class owns a mean and an unconstrained square matrix whose strict
//! lower triangle and softplus-transformed diagonal form a Cholesky factor.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::linalg::forward_substitute;
use crate::numeric::softplus;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Floor added to the softplus diagonal of every Cholesky factor.
pub const MIN_DIAG: f64 = 1e-6;

/// Raw diagonal value whose softplus is (almost exactly) one.
pub fn unit_diag_raw() -> f64 {
    diag_raw_for(1.0)
}

/// Raw diagonal value whose softplus is `scale` (inverse softplus).
pub fn diag_raw_for(scale: f64) -> f64 {
    scale.exp_m1().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeDistribution {
    pub class_index: usize,
    pub mean: Vec<f64>,
    /// Effective lower-triangular factor, row-major `l × l`. All zeros for a
    /// point prototype.
    chol: Vec<f64>,
}

impl PrototypeDistribution {
    /// Builds the distribution from unconstrained parameters (`chol_raw` is
    /// row-major `l × l`; its upper triangle is ignored).
    pub fn from_raw(class_index: usize, mean: Vec<f64>, chol_raw: &[f64]) -> Result<Self> {
        let l = mean.len();
        if chol_raw.len() != l * l {
            return Err(Error::invalid(format!("factor has {} entries, expected {}", chol_raw.len(), l * l)));
        }
        let mut chol = vec![0.0; l * l];
        for i in 0..l {
            chol[i * l..i * l + i].copy_from_slice(&chol_raw[i * l..i * l + i]);
            chol[i * l + i] = softplus(chol_raw[i * l + i]) + MIN_DIAG;
        }
        Ok(PrototypeDistribution { class_index, mean, chol })
    }

    /// Builds the distribution from an explicit lower-triangular factor with
    /// positive diagonal.
    pub fn from_factor(class_index: usize, mean: Vec<f64>, chol: Vec<f64>) -> Result<Self> {
        let l = mean.len();
        if chol.len() != l * l {
            return Err(Error::invalid(format!("factor has {} entries, expected {}", chol.len(), l * l)));
        }
        for i in 0..l {
            if !(chol[i * l + i] > 0.0) || chol[i * l + i + 1..(i + 1) * l].iter().any(|&v| v != 0.0) {
                return Err(Error::invalid("factor must be lower triangular with a positive diagonal"));
            }
        }
        Ok(PrototypeDistribution { class_index, mean, chol })
    }

    /// A deterministic prototype located at `mean`.
    pub fn point(class_index: usize, mean: Vec<f64>) -> Self {
        let l = mean.len();
        PrototypeDistribution { class_index, mean, chol: vec![0.0; l * l] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_point(&self) -> bool {
        self.chol.iter().all(|&v| v == 0.0)
    }

    pub fn cholesky(&self) -> &[f64] {
        &self.chol
    }

    /// `L Lᵀ`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let l = self.dim();
        let mut cov = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.chol[i * l + k] * self.chol[j * l + k]).sum();
                cov[i * l + j] = s;
                cov[j * l + i] = s;
            }
        }
        cov
    }

    /// `mean + L z` for a standard-normal vector `z`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        let l = self.dim();
        (0..l)
            .map(|i| self.mean[i] + (0..=i).map(|k| self.chol[i * l + k] * z[k]).sum::<f64>())
            .collect()
    }

    /// Exact multivariate normal log-density at `z`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let l = self.dim();
        if z.len() != l {
            return Err(Error::invalid(format!("point has dimension {}, expected {l}", z.len())));
        }
        let mut v: Vec<f64> = z.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        forward_substitute(&self.chol, l, &mut v);
        let quad: f64 = v.iter().map(|a| a * a).sum();
        let log_det: f64 = (0..l).map(|i| self.chol[i * l + i].ln()).sum();
        Ok(-0.5 * l as f64 * (2.0 * PI).ln() - log_det - 0.5 * quad)
    }
}

/// One draw of all class prototypes; row `i` belongs to class `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub samples: Tensor,
    pub sample_id: usize,
}

impl PrototypeSet {
    pub fn class_count(&self) -> usize {
        self.samples.rows()
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.samples.row(class)
    }
}

/// Draws one prototype per class from `dists` using caller-supplied
/// standard-normal `noise` (`[c, l]`).
pub fn sample_set_with_noise(dists: &[PrototypeDistribution], noise: &Tensor, sample_id: usize) -> Result<PrototypeSet> {
    let l = dists.first().map_or(0, PrototypeDistribution::dim);
    if noise.shape() != [dists.len(), l] {
        return Err(Error::invalid(format!("noise {:?} does not match {} classes of dimension {l}", noise.shape(), dists.len())));
    }
    let mut data = Vec::with_capacity(dists.len() * l);
    for (i, d) in dists.iter().enumerate() {
        data.extend(d.transform(noise.row(i)));
    }
    Ok(PrototypeSet { samples: Tensor::matrix(dists.len(), l, data), sample_id })
}

pub fn standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Draws one prototype per class, independently across classes.
pub fn sample_set(dists: &[PrototypeDistribution], rng: &mut Rng, sample_id: usize) -> Result<PrototypeSet> {
    let l = dists.first().map_or(0, PrototypeDistribution::dim);
    let noise = standard_normal(rng, dists.len(), l);
    sample_set_with_noise(dists, &noise, sample_id)
}

/// Prototype parameters as graph nodes: `mean` is `[c, l]`, `chol_raw` is
/// `[c, l·l]` with one row-major raw factor per class.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeVars {
    pub mean: Var,
    pub chol_raw: Var,
    pub class_count: usize,
    pub dim: usize,
}

impl PrototypeVars {
    pub fn mean_of(&self, g: &mut Graph, class: usize) -> Var {
        g.slice(self.mean, Axis::Rows, class, class + 1)
    }

    /// Effective `l × l` Cholesky factor of one class.
    pub fn factor_of(&self, g: &mut Graph, class: usize) -> Var {
        let raw = g.slice(self.chol_raw, Axis::Rows, class, class + 1);
        let square = g.reshape(raw, self.dim);
        g.chol_factor(square, MIN_DIAG)
    }
}

/// Reparameterized draws inside the graph.
///
/// `noise` is `[c·n, l]` in class-major order (row `i·n + k` is draw `k` of
/// class `i`). The result is `[n·c, l]` in draw-major order: row `k·c + i`
/// holds draw `k` of class `i`, so each consecutive block of `c` rows is one
/// prototype set.
pub fn differentiable_sample(g: &mut Graph, protos: PrototypeVars, noise: Var, draws: usize) -> Var {
    let c = protos.class_count;
    let mut per_class = Vec::with_capacity(c);
    for i in 0..c {
        let z = g.slice(noise, Axis::Rows, i * draws, (i + 1) * draws);
        let l = protos.factor_of(g, i);
        let lt = g.transpose(l);
        let scaled = g.matmul(z, lt);
        let mean = protos.mean_of(g, i);
        per_class.push(g.add(scaled, mean));
    }
    let stacked = g.concat(&per_class, Axis::Rows);
    let order = (0..draws).flat_map(|k| (0..c).map(move |i| i * draws + k)).collect();
    g.gather(stacked, Axis::Rows, order)
}

/// Log-density of every row of `points` (`[b, l]`) under every class:
/// returns `[b, c]`.
pub fn log_density_graph(g: &mut Graph, protos: PrototypeVars, points: Var) -> Var {
    let half_log_2pi = 0.5 * protos.dim as f64 * (2.0 * PI).ln();
    let mut cols = Vec::with_capacity(protos.class_count);
    for i in 0..protos.class_count {
        let l = protos.factor_of(g, i);
        let mean = protos.mean_of(g, i);
        let centered = g.sub(points, mean);
        let v = g.tri_solve(l, centered);
        let sq = g.square(v);
        let quad = g.row_sum(sq);
        let diag = g.diag(l);
        let log_diag = g.log(diag);
        let log_det = g.sum(log_diag);
        let half = g.scale(quad, -0.5);
        let shifted = g.sub(half, log_det);
        cols.push(g.add_scalar(shifted, -half_log_2pi));
    }
    g.concat(&cols, Axis::Cols)
}

/// Class-major standard-normal noise rows re-ordered to match a
/// class-by-class list of draws; helper for mirroring graph sampling outside
/// the graph.
pub fn draw_major_sets(dists: &[PrototypeDistribution], noise: &Tensor, draws: usize) -> Result<Vec<PrototypeSet>> {
    let c = dists.len();
    let l = dists.first().map_or(0, PrototypeDistribution::dim);
    if noise.shape() != [c * draws, l] {
        return Err(Error::invalid("noise shape does not match classes × draws"));
    }
    (0..draws)
        .map(|k| {
            let rows: Vec<usize> = (0..c).map(|i| i * draws + k).collect();
            sample_set_with_noise(dists, &noise.select_rows(&rows), k)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Bindings;
    use crate::rng;

    fn identity_raw(l: usize) -> Vec<f64> {
        let mut raw = vec![0.0; l * l];
        for i in 0..l {
            raw[i * l + i] = unit_diag_raw();
        }
        raw
    }

    #[test]
    fn unit_diagonal_initialization() {
        let d = PrototypeDistribution::from_raw(0, vec![0.0; 3], &identity_raw(3)).unwrap();
        for i in 0..3 {
            assert!((d.cholesky()[i * 3 + i] - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn log_density_at_mode_of_standard_normal() {
        let mut d = PrototypeDistribution::from_raw(0, vec![0.3, -0.2], &identity_raw(2)).unwrap();
        d.chol = vec![1.0, 0.0, 0.0, 1.0];
        let v = d.log_density(&[0.3, -0.2]).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn zero_noise_returns_means() {
        let dists: Vec<_> = (0..3)
            .map(|i| PrototypeDistribution::from_raw(i, vec![i as f64, 1.0], &[0.4, 0.0, -0.3, 0.2]).unwrap())
            .collect();
        let set = sample_set_with_noise(&dists, &Tensor::zeros(&[3, 2]), 0).unwrap();
        for i in 0..3 {
            assert_eq!(set.prototype(i), dists[i].mean.as_slice());
        }
    }

    #[test]
    fn graph_and_direct_sampling_agree() {
        let (c, l, n) = (3, 2, 4);
        let mut r = rng::seeded(5);
        let means = standard_normal(&mut r, c, l);
        let raws = standard_normal(&mut r, c, l * l);
        let noise = standard_normal(&mut r, c * n, l);
        let dists: Vec<_> = (0..c)
            .map(|i| PrototypeDistribution::from_raw(i, means.row(i).to_vec(), raws.row(i)).unwrap())
            .collect();

        let mut g = Graph::new();
        let pv = PrototypeVars { mean: g.input("mean", true), chol_raw: g.input("chol", true), class_count: c, dim: l };
        let nv = g.input("noise", false);
        let out = differentiable_sample(&mut g, pv, nv, n);
        let mut b = Bindings::new();
        b.bind("mean", &means).bind("chol", &raws).bind("noise", &noise);
        let ev = g.forward(&b).unwrap();
        let sets = draw_major_sets(&dists, &noise, n).unwrap();
        for (k, set) in sets.iter().enumerate() {
            for i in 0..c {
                let row = ev.value(out).row(k * c + i);
                for (a, e) in row.iter().zip(set.prototype(i)) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn graph_log_density_matches_direct() {
        let (c, l) = (2, 3);
        let mut r = rng::seeded(8);
        let means = standard_normal(&mut r, c, l);
        let raws = standard_normal(&mut r, c, l * l);
        let pts = standard_normal(&mut r, 4, l);
        let mut g = Graph::new();
        let pv = PrototypeVars { mean: g.input("mean", true), chol_raw: g.input("chol", true), class_count: c, dim: l };
        let p = g.input("p", false);
        let out = log_density_graph(&mut g, pv, p);
        let mut b = Bindings::new();
        b.bind("mean", &means).bind("chol", &raws).bind("p", &pts);
        let ev = g.forward(&b).unwrap();
        for i in 0..c {
            let d = PrototypeDistribution::from_raw(i, means.row(i).to_vec(), raws.row(i)).unwrap();
            for k in 0..4 {
                let e = d.log_density(pts.row(k)).unwrap();
                assert!((ev.value(out).row(k)[i] - e).abs() < 1e-10);
            }
        }
    }
}
