//! Dataset-level evaluation: accuracy, uncertainty-aware rejection,
//! out-of-distribution summaries, latent region maps and exemplar dumps.
//!
//! Input `i` of any evaluated set draws its prototypes from random stream `i`
//! under the master seed, so every metric derived from one pass shares the
//! same draws and repeated runs are identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::classifier::{predict_embedding, PredictiveDistribution};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::explain::export_grid;
use crate::model::Model;
use crate::rng::{self, Purpose};
use crate::uncertainty::{
    aleatoric_overlap, delta_statistics, epistemic_only_map, epistemic_quantile, predictive_uncertainty, DeltaStatistics,
    EpistemicReference, PredictiveUncertainty,
};

/// What to compute for every input besides the prediction itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct SummaryOptions<'a> {
    pub reference: Option<&'a EpistemicReference>,
    pub aleatoric: bool,
}

/// Per-input results retained from one sampling pass.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSummary {
    pub label: usize,
    pub predicted: usize,
    pub mean_probs: Vec<f64>,
    pub predictive: PredictiveUncertainty,
    pub deltas: DeltaStatistics,
    pub u_a: Option<f64>,
    pub u_e: Option<f64>,
}

impl InputSummary {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

/// Predictive distribution of embedding `e` using random stream `index`.
pub fn predict_indexed(model: &Model, e: &[f64], n: usize, seed: u64, index: usize) -> Result<PredictiveDistribution> {
    let dists = model.prototypes()?;
    let mut rng = rng::stream(seed, Purpose::Inference, index as u64);
    predict_embedding(e, &dists, n, &mut rng)
}

/// One sampling pass over `data`, summarized per input.
pub fn summarize(model: &Model, data: &Dataset, n: usize, seed: u64, opts: SummaryOptions<'_>) -> Result<Vec<InputSummary>> {
    let enc = model.encode(&data.inputs)?;
    let dists = model.prototypes()?;
    let checksum = opts.reference.map(|_| model.checksum());
    (0..data.len())
        .map(|i| {
            let mut rng = rng::stream(seed, Purpose::Inference, i as u64);
            let pd = predict_embedding(enc.embedding(i), &dists, n, &mut rng)?;
            let deltas = delta_statistics(&pd);
            let u_e = match (opts.reference, &checksum) {
                (Some(r), Some(c)) => Some(epistemic_quantile(&deltas, r, c)?),
                _ => None,
            };
            Ok(InputSummary {
                label: data.labels[i],
                predicted: pd.predicted_class,
                predictive: predictive_uncertainty(&pd, pd.class_count()),
                u_a: opts.aleatoric.then(|| aleatoric_overlap(&pd)),
                mean_probs: pd.mean_probs,
                deltas,
                u_e,
            })
        })
        .collect()
}

pub fn accuracy(summaries: &[InputSummary]) -> f64 {
    if summaries.is_empty() {
        return 0.0;
    }
    summaries.iter().filter(|s| s.correct()).count() as f64 / summaries.len() as f64
}

/// Fraction of inputs whose mean-probability prediction matches the label.
pub fn evaluate_accuracy(model: &Model, test: &Dataset, n: usize, seed: u64) -> Result<f64> {
    Ok(accuracy(&summarize(model, test, n, seed, SummaryOptions::default())?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RejectionRow {
    pub alpha: f64,
    pub discarded_fraction: f64,
    pub accuracy_retained: f64,
    pub error_rate_discarded: f64,
    pub error_rate_retained: f64,
    pub discarded: usize,
    pub retained: usize,
}

impl RejectionRow {
    pub const CSV_HEADER: &'static str =
        "alpha,discarded_fraction,accuracy_retained,error_rate_discarded,error_rate_retained,discarded,retained";
}

/// Rejection statistics where an input is discarded iff its epistemic
/// uncertainty exceeds `alpha`. Error rates of an empty group are zero.
pub fn rejection_rows(summaries: &[InputSummary], alphas: &[f64]) -> Result<Vec<RejectionRow>> {
    let scores: Vec<(f64, bool)> = summaries
        .iter()
        .map(|s| s.u_e.map(|u| (u, s.correct())).ok_or_else(|| Error::invalid("summaries lack epistemic scores")))
        .collect::<Result<_>>()?;
    let rate = |wrong: usize, total: usize| if total == 0 { 0.0 } else { wrong as f64 / total as f64 };
    Ok(alphas
        .iter()
        .map(|&alpha| {
            let (mut kept, mut kept_wrong, mut gone, mut gone_wrong) = (0, 0, 0, 0);
            for &(u, ok) in &scores {
                if u > alpha {
                    gone += 1;
                    gone_wrong += usize::from(!ok);
                } else {
                    kept += 1;
                    kept_wrong += usize::from(!ok);
                }
            }
            RejectionRow {
                alpha,
                discarded_fraction: rate(gone, scores.len()),
                accuracy_retained: if kept == 0 { 0.0 } else { 1.0 - rate(kept_wrong, kept) },
                error_rate_discarded: rate(gone_wrong, gone),
                error_rate_retained: rate(kept_wrong, kept),
                discarded: gone,
                retained: kept,
            }
        })
        .collect())
}

pub fn rejection_sweep(
    model: &Model,
    test: &Dataset,
    reference: &EpistemicReference,
    alphas: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<RejectionRow>> {
    let s = summarize(model, test, n, seed, SummaryOptions { reference: Some(reference), aleatoric: false })?;
    rejection_rows(&s, alphas)
}

pub fn rejection_csv(rows: &[RejectionRow]) -> String {
    let mut s = format!("{}\n", RejectionRow::CSV_HEADER);
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.alpha, r.discarded_fraction, r.accuracy_retained, r.error_rate_discarded, r.error_rate_retained, r.discarded, r.retained
        );
    }
    s
}

pub const OOD_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct OodSummary {
    pub in_histogram: Vec<usize>,
    pub ood_histogram: Vec<usize>,
    pub in_median: f64,
    pub ood_median: f64,
}

/// Counts of `values` in equal-width bins over `[0, 1]`; 1.0 lands in the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &v in values {
        let k = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[k] += 1;
    }
    h
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn epistemic_scores(model: &Model, reference: &EpistemicReference, data: &Dataset, n: usize, seed: u64) -> Result<Vec<f64>> {
    let s = summarize(model, data, n, seed, SummaryOptions { reference: Some(reference), aleatoric: false })?;
    Ok(s.iter().map(|s| s.u_e.expect("reference supplied")).collect())
}

pub fn ood_eval(
    model: &Model,
    reference: &EpistemicReference,
    in_test: &Dataset,
    ood_test: &Dataset,
    n: usize,
    seed: u64,
) -> Result<OodSummary> {
    if in_test.input_dim() != ood_test.input_dim() {
        return Err(Error::invalid(format!(
            "in-distribution inputs have dimension {}, out-of-distribution {}",
            in_test.input_dim(),
            ood_test.input_dim()
        )));
    }
    let in_scores = epistemic_scores(model, reference, in_test, n, seed)?;
    // Out-of-distribution labels are meaningless for this model; only the
    // embeddings matter, so relabel to class 0 to satisfy the class count.
    let ood = Dataset::new(ood_test.inputs.clone(), vec![0; ood_test.len()], model.class_count(), ood_test.image_shape)?;
    let ood_scores = epistemic_scores(model, reference, &ood, n, seed)?;
    Ok(OodSummary {
        in_histogram: histogram(&in_scores, OOD_BINS),
        ood_histogram: histogram(&ood_scores, OOD_BINS),
        in_median: median(&in_scores),
        ood_median: median(&ood_scores),
    })
}

pub fn ood_csv(s: &OodSummary) -> String {
    let mut out = String::from("bin_low,bin_high,in_count,ood_count\n");
    for k in 0..OOD_BINS {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            k as f64 / OOD_BINS as f64,
            (k + 1) as f64 / OOD_BINS as f64,
            s.in_histogram[k],
            s.ood_histogram[k]
        );
    }
    out
}

/// Latent rectangle `[x_min, x_max] × [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionCell {
    pub x: f64,
    pub y: f64,
    pub u_a: f64,
    pub u_e: f64,
    pub epistemic_only: f64,
}

/// Uncertainties on a `resolution × resolution` grid of latent points,
/// which are used directly as embeddings. Rows run over `y`, then `x`.
pub fn region_map(
    model: &Model,
    reference: &EpistemicReference,
    bounds: Bounds,
    resolution: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<RegionCell>> {
    if model.latent_dim() != 2 {
        return Err(Error::invalid(format!("region maps need a 2-D latent space, model has {}", model.latent_dim())));
    }
    if resolution < 2 || !(bounds.x_max > bounds.x_min && bounds.y_max > bounds.y_min) {
        return Err(Error::invalid("region map needs resolution ≥ 2 and nonempty bounds"));
    }
    let checksum = model.checksum();
    let dists = model.prototypes()?;
    let step = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / (resolution - 1) as f64;
    let mut cells = Vec::with_capacity(resolution * resolution);
    for iy in 0..resolution {
        for ix in 0..resolution {
            let (x, y) = (step(bounds.x_min, bounds.x_max, ix), step(bounds.y_min, bounds.y_max, iy));
            let mut rng = rng::stream(seed, Purpose::Inference, (iy * resolution + ix) as u64);
            let pd = predict_embedding(&[x, y], &dists, n, &mut rng)?;
            let u_a = aleatoric_overlap(&pd);
            let u_e = epistemic_quantile(&delta_statistics(&pd), reference, &checksum)?;
            cells.push(RegionCell { x, y, u_a, u_e, epistemic_only: epistemic_only_map(u_e, u_a) });
        }
    }
    Ok(cells)
}

pub fn region_csv(cells: &[RegionCell]) -> String {
    let mut s = String::from("x,y,u_a,u_e,u_e_minus_u_a\n");
    for c in cells {
        let _ = writeln!(s, "{},{},{},{},{}", c.x, c.y, c.u_a, c.u_e, c.epistemic_only);
    }
    s
}

/// Files written by [`exemplar_dump`] and the selected inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarDump {
    pub high: Vec<(usize, f64)>,
    pub low: Vec<(usize, f64)>,
    pub high_grid: PathBuf,
    pub low_grid: PathBuf,
    pub csv: PathBuf,
}

/// Exports the `count` inputs with the highest and the lowest epistemic
/// uncertainty (ties broken by index) as image grids plus a CSV.
pub fn exemplar_dump(
    model: &Model,
    reference: &EpistemicReference,
    test: &Dataset,
    n: usize,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<ExemplarDump> {
    if count == 0 || count > test.len() {
        return Err(Error::invalid(format!("count {count} must be in 1..={}", test.len())));
    }
    let scores = epistemic_scores(model, reference, test, n, seed)?;
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let low: Vec<(usize, f64)> = order[..count].iter().map(|&i| (i, scores[i])).collect();
    let high: Vec<(usize, f64)> = order.iter().rev().take(count).map(|&i| (i, scores[i])).collect();

    fs::create_dir_all(out_dir)?;
    let shape = test.display_shape();
    let images = |sel: &[(usize, f64)]| sel.iter().map(|&(i, _)| test.input(i).to_vec()).collect::<Vec<_>>();
    let columns = (count as f64).sqrt().ceil() as usize;
    let high_grid = out_dir.join("exemplars_high.pgm");
    let low_grid = out_dir.join("exemplars_low.pgm");
    export_grid(&images(&high), shape, columns, &high_grid)?;
    export_grid(&images(&low), shape, columns, &low_grid)?;
    let mut csv = String::from("group,rank,index,label,u_e\n");
    for (group, sel) in [("high", &high), ("low", &low)] {
        for (rank, &(i, u)) in sel.iter().enumerate() {
            let _ = writeln!(csv, "{group},{rank},{i},{},{u}", test.labels[i]);
        }
    }
    let csv_path = out_dir.join("exemplars.csv");
    fs::write(&csv_path, csv)?;
    Ok(ExemplarDump { high, low, high_grid, low_grid, csv: csv_path })
}
