//! Independent closed-form oracles for sampling, densities, kernel density
//! estimates, overlaps and the entropy decomposition.

#![allow(dead_code)]

use psenn_core::prototypes::{sample_set, PrototypeDistribution};
use psenn_core::rng;
use psenn_core::uncertainty::{decompose, density_overlap, Density};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Random lower-triangular factor with a positive diagonal, row-major.
pub fn random_factor(r: &mut ChaCha8Rng, l: usize) -> Vec<f64> {
    let mut f = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..i {
            f[i * l + j] = r.random_range(-0.8..0.8);
        }
        f[i * l + i] = r.random_range(0.3..1.5);
    }
    f
}

fn covariance_of(f: &[f64], l: usize) -> Vec<f64> {
    let mut s = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            s[i * l + j] = (0..l).map(|k| f[i * l + k] * f[j * l + k]).sum();
        }
    }
    s
}

/// Inverse and log-determinant by Gauss-Jordan elimination with partial pivoting.
fn inverse_and_logdet(a: &[f64], l: usize) -> (Vec<f64>, f64) {
    let mut m = a.to_vec();
    let mut inv: Vec<f64> = (0..l * l).map(|k| if k / l == k % l { 1.0 } else { 0.0 }).collect();
    let mut logdet = 0.0;
    for col in 0..l {
        let p = (col..l).max_by(|&x, &y| m[x * l + col].abs().total_cmp(&m[y * l + col].abs())).unwrap();
        if p != col {
            for k in 0..l {
                m.swap(p * l + k, col * l + k);
                inv.swap(p * l + k, col * l + k);
            }
        }
        let d = m[col * l + col];
        logdet += d.abs().ln();
        for k in 0..l {
            m[col * l + k] /= d;
            inv[col * l + k] /= d;
        }
        for row in (0..l).filter(|&r| r != col) {
            let f = m[row * l + col];
            for k in 0..l {
                m[row * l + k] -= f * m[col * l + k];
                inv[row * l + k] -= f * inv[col * l + k];
            }
        }
    }
    (inv, logdet)
}

/// Multivariate normal log density from the covariance matrix.
pub fn closed_form_log_density(mean: &[f64], cov: &[f64], z: &[f64]) -> f64 {
    let l = mean.len();
    let (inv, logdet) = inverse_and_logdet(cov, l);
    let d: Vec<f64> = z.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for i in 0..l {
        for j in 0..l {
            q += d[i] * inv[i * l + j] * d[j];
        }
    }
    -0.5 * (l as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + q)
}

pub struct MomentCheck {
    /// Largest |sample mean - mean| in units of its standard error.
    pub mean_z: f64,
    /// Relative Frobenius error of the sample covariance.
    pub cov_rel: f64,
}

/// Moments of `draws` prototype samples of a random `l`-dimensional distribution.
pub fn sampling_moments(seed: u64, l: usize, draws: usize) -> MomentCheck {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mean: Vec<f64> = (0..l).map(|_| r.random_range(-2.0..2.0)).collect();
    let factor = random_factor(&mut r, l);
    let dist = PrototypeDistribution::from_factor(0, mean.clone(), factor.clone()).unwrap();
    let dists = [dist];
    let mut rng = rng::seeded(seed);
    let mut sum = vec![0.0; l];
    let mut outer = vec![0.0; l * l];
    for s in 0..draws {
        let set = sample_set(&dists, &mut rng, s).unwrap();
        let p = set.prototype(0);
        let d: Vec<f64> = p.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..l {
            sum[i] += d[i];
            for j in 0..l {
                outer[i * l + j] += d[i] * d[j];
            }
        }
    }
    let n = draws as f64;
    let cov = covariance_of(&factor, l);
    let sample_mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mean_z = (0..l).map(|i| sample_mean[i].abs() / (cov[i * l + i] / n).sqrt()).fold(0.0, f64::max);
    // Covariance about the sample mean.
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..l {
        for j in 0..l {
            let c = outer[i * l + j] / n - sample_mean[i] * sample_mean[j];
            num += (c - cov[i * l + j]).powi(2);
            den += cov[i * l + j].powi(2);
        }
    }
    MomentCheck { mean_z, cov_rel: (num / den).sqrt() }
}

/// Largest |implementation - closed form| log density over random
/// distributions and evaluation points.
pub fn log_density_error(seed: u64, trials: usize) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let l = r.random_range(1..=6);
        let mean: Vec<f64> = (0..l).map(|_| r.random_range(-2.0..2.0)).collect();
        let factor = random_factor(&mut r, l);
        let dist = PrototypeDistribution::from_factor(0, mean.clone(), factor.clone()).unwrap();
        let z: Vec<f64> = (0..l).map(|_| r.random_range(-3.0..3.0)).collect();
        let got = dist.log_density(&z).unwrap();
        let want = closed_form_log_density(&mean, &covariance_of(&factor, l), &z);
        worst = worst.max((got - want).abs());
    }
    worst
}

/// Trapezoid integral of the density of a random 2-D distribution over
/// a box of +-8 standard deviations.
pub fn density_integral_2d(seed: u64, grid: usize) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mean = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
    let factor = random_factor(&mut r, 2);
    let cov = covariance_of(&factor, 2);
    let dist = PrototypeDistribution::from_factor(0, mean.clone(), factor).unwrap();
    let (sx, sy) = (8.0 * cov[0].sqrt(), 8.0 * cov[3].sqrt());
    let (hx, hy) = (2.0 * sx / (grid - 1) as f64, 2.0 * sy / (grid - 1) as f64);
    let mut total = 0.0;
    for i in 0..grid {
        for j in 0..grid {
            let z = [mean[0] - sx + i as f64 * hx, mean[1] - sy + j as f64 * hy];
            let w = |k: usize| if k == 0 || k == grid - 1 { 0.5 } else { 1.0 };
            total += w(i) * w(j) * dist.log_density(&z).unwrap().exp();
        }
    }
    total * hx * hy
}

fn normal_samples(seed: u64, n: usize, shift: f64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| shift + r.sample::<f64, _>(StandardNormal)).collect()
}

/// |KDE at 0 - standard normal density at 0| for `n` standard normal draws.
pub fn kde_mode_error(seed: u64, n: usize) -> f64 {
    let d = Density::fit(&normal_samples(seed, n, 0.0));
    (d.eval(0.0) - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs()
}

/// (overlap of a sample set with itself, overlap with a far-shifted copy).
pub fn overlap_identical_disjoint(seed: u64, n: usize) -> (f64, f64) {
    let a = normal_samples(seed, n, 0.0);
    let b: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
    let fa = Density::fit(&a);
    (density_overlap(&fa, &fa), density_overlap(&fa, &Density::fit(&b)))
}

pub struct DecompositionCheck {
    pub identity_error: f64,
    pub min_mi: f64,
}

/// Identity and sign checks over `count` random predictive distributions.
pub fn decomposition(seed: u64, count: usize) -> DecompositionCheck {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DecompositionCheck { identity_error: 0.0, min_mi: f64::INFINITY };
    for _ in 0..count {
        let c = r.random_range(2..=10);
        let n = r.random_range(1..=50);
        let sharp = r.random_range(0.1..8.0);
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let logits: Vec<f64> = (0..c).map(|_| sharp * r.sample::<f64, _>(StandardNormal)).collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect();
        let mean: Vec<f64> = (0..c).map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / n as f64).collect();
        let refs: Vec<&[f64]> = draws.iter().map(Vec::as_slice).collect();
        let u = decompose(&mean, &refs, c);
        out.identity_error = out.identity_error.max((u.total - u.epistemic_mi - u.aleatoric_expected_entropy).abs());
        out.min_mi = out.min_mi.min(u.epistemic_mi);
    }
    out
}
