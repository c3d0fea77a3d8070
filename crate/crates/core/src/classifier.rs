//! Distance-based classification with a fixed negative-identity head and the
//! sampling-based predictive distribution.

use crate::error::{Error, Result};
use crate::numeric::{argmax, softmax_in_place};
use crate::model::Model;
use crate::prototypes::{sample_set, PrototypeDistribution, PrototypeSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Squared Euclidean distance from `e` to every prototype in `set`.
pub fn distances(e: &[f64], set: &PrototypeSet) -> Result<Vec<f64>> {
    if set.samples.cols() != e.len() {
        return Err(Error::invalid(format!("embedding has dimension {}, prototypes {}", e.len(), set.samples.cols())));
    }
    Ok((0..set.class_count())
        .map(|i| set.prototype(i).iter().zip(e).map(|(r, x)| (x - r) * (x - r)).sum())
        .collect())
}

/// Class probabilities `softmax(-delta)`.
pub fn head(delta: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = delta.iter().map(|d| -d).collect();
    softmax_in_place(&mut p);
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSample {
    pub prototypes: PrototypeSet,
    pub delta: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    pub mean_probs: Vec<f64>,
    pub samples: Vec<PredictiveSample>,
    /// Index of the largest mean probability, lowest index on ties.
    pub predicted_class: usize,
}

impl PredictiveDistribution {
    pub fn class_count(&self) -> usize {
        self.mean_probs.len()
    }

    pub fn draws(&self) -> usize {
        self.samples.len()
    }

    /// Distance draws for one class across all samples.
    pub fn class_deltas(&self, class: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.delta[class]).collect()
    }
}

/// Predictive distribution for an embedding, averaging `n` sampled prototype sets.
pub fn predict_embedding(e: &[f64], dists: &[PrototypeDistribution], n: usize, rng: &mut Rng) -> Result<PredictiveDistribution> {
    if n < 1 {
        return Err(Error::invalid("at least one prototype draw is required"));
    }
    let c = dists.len();
    let mut mean_probs = vec![0.0; c];
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let prototypes = sample_set(dists, rng, k)?;
        let delta = distances(e, &prototypes)?;
        let probs = head(&delta);
        for (m, p) in mean_probs.iter_mut().zip(&probs) {
            *m += p;
        }
        samples.push(PredictiveSample { prototypes, delta, probs });
    }
    for m in &mut mean_probs {
        *m /= n as f64;
    }
    let predicted_class = argmax(&mean_probs);
    Ok(PredictiveDistribution { mean_probs, samples, predicted_class })
}

/// Encodes `x` and returns its predictive distribution.
pub fn predict(x: &[f64], model: &Model, n: usize, rng: &mut Rng) -> Result<PredictiveDistribution> {
    let enc = model.encode(&Tensor::row_vector(x.to_vec()))?;
    predict_embedding(enc.embedding(0), &model.prototypes()?, n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::unit_diag_raw;
    use crate::rng;

    fn set(rows: &[[f64; 2]]) -> PrototypeSet {
        PrototypeSet { samples: Tensor::matrix(rows.len(), 2, rows.iter().flatten().copied().collect()), sample_id: 0 }
    }

    #[test]
    fn distance_cases() {
        assert_eq!(distances(&[0.0, 0.0], &set(&[[3.0, 4.0]])).unwrap(), vec![25.0]);
        assert_eq!(distances(&[1.0, 2.0], &set(&[[1.0, 2.0], [0.0, 2.0]])).unwrap(), vec![0.0, 1.0]);
        assert!(distances(&[1.0], &set(&[[1.0, 2.0]])).is_err());
    }

    #[test]
    fn head_cases() {
        let p = head(&[0.0, 2f64.ln()]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(head(&[1.5, 1.5, 1.5, 1.5]), vec![0.25; 4]);
        let a = head(&[0.3, 1.1, 2.0]);
        let b = head(&[5.3, 6.1, 7.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn single_draw_matches_sample() {
        let dists: Vec<_> = (0..3)
            .map(|i| PrototypeDistribution::from_raw(i, vec![i as f64, 0.0], &[unit_diag_raw(), 0.0, 0.0, unit_diag_raw()]).unwrap())
            .collect();
        let pd = predict_embedding(&[0.2, 0.1], &dists, 1, &mut rng::seeded(0)).unwrap();
        assert_eq!(pd.mean_probs, pd.samples[0].probs);
        assert!(predict_embedding(&[0.2, 0.1], &dists, 0, &mut rng::seeded(0)).is_err());
        let again = predict_embedding(&[0.2, 0.1], &dists, 1, &mut rng::seeded(0)).unwrap();
        assert_eq!(pd, again);
    }

    #[test]
    fn near_degenerate_factors_give_identical_draws() {
        let eps = 1e-9;
        let dists: Vec<_> = (0..2)
            .map(|i| PrototypeDistribution::from_factor(i, vec![i as f64, 1.0], vec![eps, 0.0, 0.0, eps]).unwrap())
            .collect();
        let pd = predict_embedding(&[0.4, 0.4], &dists, 20, &mut rng::seeded(3)).unwrap();
        for s in &pd.samples {
            for (a, b) in s.probs.iter().zip(&pd.samples[0].probs) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
