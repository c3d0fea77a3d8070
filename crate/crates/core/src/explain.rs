//! Explanations assembled from the sampled prototypes of one prediction,
//! plus PGM grid and JSON report export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{predict_embedding, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::uncertainty::{uncertainty_report, EpistemicReference, UncertaintyReport};

pub const REPORT_VERSION: u32 = 1;
/// Closest prototypes shown per class.
pub const DEFAULT_K: usize = 4;
/// Classes listed in a report, most likely first.
pub const REPORT_TOP_CLASSES: usize = 4;

/// One sampled prototype, decoded.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedPrototype {
    pub draw: usize,
    pub distance: f64,
    pub image: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub input_id: usize,
    pub input: Vec<f64>,
    pub image_shape: (usize, usize),
    pub predicted_class: usize,
    pub mean_probs: Vec<f64>,
    /// Per class, every draw sorted by ascending distance (ties by draw).
    pub ranked: Vec<Vec<RankedPrototype>>,
    pub k: usize,
    pub uncertainty: UncertaintyReport,
}

impl Explanation {
    pub fn class_count(&self) -> usize {
        self.ranked.len()
    }

    pub fn best_candidates(&self) -> &[RankedPrototype] {
        &self.ranked[self.predicted_class][..self.k]
    }

    /// The `k` closest prototypes of every other class.
    pub fn counterarguments(&self) -> Vec<(usize, &[RankedPrototype])> {
        (0..self.class_count())
            .filter(|&c| c != self.predicted_class)
            .map(|c| (c, &self.ranked[c][..self.k]))
            .collect()
    }

    /// The `k` most distant predicted-class prototypes, farthest first.
    pub fn farthest(&self) -> Vec<&RankedPrototype> {
        self.ranked[self.predicted_class].iter().rev().take(self.k).collect()
    }

    /// Classes ordered by mean probability, ties toward the lower index.
    pub fn classes_by_probability(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.class_count()).collect();
        order.sort_by(|&a, &b| self.mean_probs[b].total_cmp(&self.mean_probs[a]).then(a.cmp(&b)));
        order
    }
}

/// Builds the explanation of an existing prediction on embedding draws.
pub fn explain_prediction(
    input_id: usize,
    input: &[f64],
    pd: &PredictiveDistribution,
    model: &Model,
    reference: &EpistemicReference,
    k: usize,
) -> Result<Explanation> {
    let n = pd.draws();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must be in 1..={n}")));
    }
    let c = pd.class_count();
    let l = model.latent_dim();
    let mut latents = Vec::with_capacity(n * c * l);
    for s in &pd.samples {
        latents.extend_from_slice(s.prototypes.samples.data());
    }
    let decoded = model.decode(&Tensor::matrix(n * c, l, latents))?;
    let ranked = (0..c)
        .map(|class| {
            let mut row: Vec<RankedPrototype> = (0..n)
                .map(|draw| RankedPrototype {
                    draw,
                    distance: pd.samples[draw].delta[class],
                    image: decoded.row(draw * c + class).to_vec(),
                })
                .collect();
            row.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.draw.cmp(&b.draw)));
            row
        })
        .collect();
    Ok(Explanation {
        input_id,
        input: input.to_vec(),
        image_shape: model.config().image_shape.unwrap_or((1, model.config().input_dim)),
        predicted_class: pd.predicted_class,
        mean_probs: pd.mean_probs.clone(),
        ranked,
        k,
        uncertainty: uncertainty_report(pd, reference, &model.checksum())?,
    })
}

/// Samples `n` prototype sets for input `x` and explains the prediction.
pub fn explain(
    input_id: usize,
    x: &[f64],
    model: &Model,
    reference: &EpistemicReference,
    n: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Explanation> {
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the {n} sampled sets")));
    }
    let enc = model.encode(&Tensor::row_vector(x.to_vec()))?;
    let pd = predict_embedding(enc.embedding(0), &model.prototypes()?, n, rng)?;
    explain_prediction(input_id, x, &pd, model, reference, k)
}

fn to_pixel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Encodes images of shape `(h, w)` as one P5 PGM, tiled row-major in
/// `columns` columns with 1-pixel white separators.
pub fn render_grid(images: &[Vec<f64>], shape: (usize, usize), columns: usize) -> Result<Vec<u8>> {
    let (h, w) = shape;
    if images.is_empty() || columns == 0 {
        return Err(Error::invalid("grid needs at least one image and one column"));
    }
    if let Some(bad) = images.iter().find(|im| im.len() != h * w) {
        return Err(Error::invalid(format!("image has {} values, grid cell is {h}x{w}", bad.len())));
    }
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(cols);
    let width = cols * w + cols - 1;
    let height = rows * h + rows - 1;
    let mut pixels = vec![255u8; width * height];
    for (i, im) in images.iter().enumerate() {
        let (top, left) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                pixels[(top + y) * width + left + x] = to_pixel(im[y * w + x]);
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn export_grid(images: &[Vec<f64>], shape: (usize, usize), columns: usize, path: &Path) -> Result<()> {
    fs::write(path, render_grid(images, shape, columns)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportUncertainty {
    pub total: f64,
    pub epistemic_mi: f64,
    pub aleatoric_expected_entropy: f64,
    pub u_a: f64,
    pub u_e: f64,
    pub u_e_minus_u_a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportClass {
    pub class: usize,
    pub probability: f64,
    pub distance_mean: f64,
    pub distance_variance: Option<f64>,
    pub closest_distances: Vec<f64>,
    pub farthest_distance: f64,
    pub grid: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub input_id: usize,
    pub predicted_class: usize,
    pub mean_probs: Vec<f64>,
    pub uncertainty: ReportUncertainty,
    /// Every class, in class order.
    pub classes: Vec<ReportClass>,
    /// The most likely classes, most likely first.
    pub top_classes: Vec<usize>,
    pub input_grid: String,
}

impl Report {
    /// Every grid file the report points at: the input panel, then one per class.
    pub fn grid_files(&self) -> Vec<&str> {
        std::iter::once(self.input_grid.as_str()).chain(self.classes.iter().map(|c| c.grid.as_str())).collect()
    }
}

pub fn build_report(e: &Explanation) -> Report {
    let u = &e.uncertainty;
    let classes = (0..e.class_count())
        .map(|c| ReportClass {
            class: c,
            probability: e.mean_probs[c],
            distance_mean: u.deltas.mean[c],
            distance_variance: u.deltas.variance.as_ref().map(|v| v[c]),
            closest_distances: e.ranked[c][..e.k].iter().map(|p| p.distance).collect(),
            farthest_distance: e.ranked[c].last().map_or(f64::NAN, |p| p.distance),
            grid: format!("class_{c}.pgm"),
        })
        .collect();
    Report {
        report_version: REPORT_VERSION,
        input_id: e.input_id,
        predicted_class: e.predicted_class,
        mean_probs: e.mean_probs.clone(),
        uncertainty: ReportUncertainty {
            total: u.predictive.total,
            epistemic_mi: u.predictive.epistemic_mi,
            aleatoric_expected_entropy: u.predictive.aleatoric_expected_entropy,
            u_a: u.u_a,
            u_e: u.u_e,
            u_e_minus_u_a: u.u_e - u.u_a,
        },
        classes,
        top_classes: e.classes_by_probability().into_iter().take(REPORT_TOP_CLASSES).collect(),
        input_grid: "input.pgm".into(),
    }
}

/// Writes `input.pgm`, one `class_{i}.pgm` per class (closest `k` then the
/// farthest draw) and `report.json` into `dir`.
pub fn export_report(e: &Explanation, dir: &Path) -> Result<Report> {
    fs::create_dir_all(dir)?;
    let report = build_report(e);
    export_grid(std::slice::from_ref(&e.input), e.image_shape, 1, &dir.join(&report.input_grid))?;
    for (c, rc) in report.classes.iter().enumerate() {
        let ranked = &e.ranked[c];
        let mut images: Vec<Vec<f64>> = ranked[..e.k].iter().map(|p| p.image.clone()).collect();
        images.push(ranked[ranked.len() - 1].image.clone());
        export_grid(&images, e.image_shape, images.len(), &dir.join(&rc.grid))?;
    }
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(dir.join("report.json"), json)?;
    Ok(report)
}
