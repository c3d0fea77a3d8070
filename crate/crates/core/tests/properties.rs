use proptest::prelude::*;

use psenn_core::classifier::{distances, head, predict_embedding};
use psenn_core::config::{parse_config, render_config, DatasetSpec, RunConfig, Synth2dSpec};
use psenn_core::data::{parse_idx, preprocess, RawImages};
use psenn_core::eval::{histogram, rejection_rows, InputSummary};
use psenn_core::model::PrototypeMode;
use psenn_core::prototypes::{PrototypeDistribution, PrototypeSet};
use psenn_core::rng;
use psenn_core::uncertainty::{aleatoric_overlap_of, decompose, delta_statistics_of, kde, EpistemicReference};
use psenn_core::vae::BackboneKind;
use psenn_core::{Bindings, Graph, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-30.0..30.0f64, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v))
}

fn distribution(class: usize, l: usize) -> impl Strategy<Value = PrototypeDistribution> {
    (prop::collection::vec(-2.0..2.0f64, l), prop::collection::vec(-1.0..1.0f64, l * l))
        .prop_map(move |(mean, raw)| PrototypeDistribution::from_raw(class, mean, &raw).unwrap())
}

fn distributions() -> impl Strategy<Value = Vec<PrototypeDistribution>> {
    (2..6usize, 2..4usize).prop_flat_map(|(c, l)| (0..c).map(|i| distribution(i, l)).collect::<Vec<_>>())
}

fn summary(u_e: f64, correct: bool) -> InputSummary {
    let u = decompose(&[0.5, 0.5], &[&[0.5, 0.5]], 2);
    InputSummary {
        label: 0,
        predicted: usize::from(!correct),
        mean_probs: vec![0.5, 0.5],
        predictive: u,
        deltas: delta_statistics_of(&[&[1.0, 1.0]]),
        u_a: None,
        u_e: Some(u_e),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in (1..5usize, 1..7usize).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::new();
        let v = g.input("x", false);
        let s = g.softmax(v);
        let mut b = Bindings::new();
        b.bind("x", &x);
        let ev = g.forward(&b).unwrap();
        let out = ev.value(s);
        for r in 0..x.rows() {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_pure(x in matrix(3, 4)) {
        let mut g = Graph::new();
        let v = g.input("x", false);
        let s = g.softmax(v);
        let mut b = Bindings::new();
        b.bind("x", &x);
        let first = g.forward(&b).unwrap().value(s).clone();
        let second = g.forward(&b).unwrap().value(s).clone();
        prop_assert_eq!(first.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        second.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn head_probabilities_sum_to_one_and_track_distance(
        delta in prop::collection::vec(0.0..50.0f64, 2..8),
        pick in any::<prop::sample::Index>(),
        shrink in 0.01..5.0f64,
    ) {
        let p = head(&delta);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let i = pick.index(delta.len());
        let mut closer = delta.clone();
        closer[i] -= shrink.min(delta[i] + 1.0);
        prop_assert!(head(&closer)[i] > p[i] || p[i] == 1.0);
    }

    #[test]
    fn distances_are_nonnegative(e in prop::collection::vec(-5.0..5.0f64, 3), protos in prop::collection::vec(-5.0..5.0f64, 12)) {
        let set = PrototypeSet { sample_id: 0, samples: Tensor::matrix(4, 3, protos) };
        prop_assert!(distances(&e, &set).unwrap().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn predictions_average_draws_and_replay(dists in distributions(), n in 1..30usize, seed in any::<u64>()) {
        let l = dists[0].dim();
        let e = vec![0.3; l];
        let pd = predict_embedding(&e, &dists, n, &mut rng::seeded(seed)).unwrap();
        prop_assert!((pd.mean_probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for (i, m) in pd.mean_probs.iter().enumerate() {
            let avg = pd.samples.iter().map(|s| s.probs[i]).sum::<f64>() / n as f64;
            prop_assert!((m - avg).abs() < 1e-12);
        }
        let best = pd.mean_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(pd.predicted_class, pd.mean_probs.iter().position(|&p| p == best).unwrap());
        let again = predict_embedding(&e, &dists, n, &mut rng::seeded(seed)).unwrap();
        prop_assert_eq!(pd, again);
    }

    #[test]
    fn aleatoric_overlap_in_unit_interval(draws in prop::collection::vec(prop::collection::vec(0.0..10.0f64, 3), 2..40)) {
        let refs: Vec<&[f64]> = draws.iter().map(Vec::as_slice).collect();
        let ds = delta_statistics_of(&refs);
        prop_assert!(ds.variance.as_ref().unwrap().iter().all(|&v| v >= 0.0));
        let u = aleatoric_overlap_of(&refs, 0);
        prop_assert!((0.0..=1.0).contains(&u));
    }

    #[test]
    fn kde_integrates_to_one(samples in prop::collection::vec(-10.0..10.0f64, 5..200)) {
        let d = kde(&samples, 512).unwrap();
        if d.bandwidth > 0.0 {
            let i = d.integral();
            prop_assert!((0.98..=1.02).contains(&i), "{}", i);
        }
    }

    #[test]
    fn epistemic_quantile_is_monotone(
        refs in prop::collection::vec(0.0..10.0f64, 1..50),
        a in 0.0..12.0f64,
        b in 0.0..12.0f64,
    ) {
        let r = EpistemicReference::new(vec![refs], 1, String::new()).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let (ql, qh) = (r.quantile(0, lo), r.quantile(0, hi));
        prop_assert!((0.0..=1.0).contains(&ql) && (0.0..=1.0).contains(&qh));
        prop_assert!(ql <= qh);
    }

    #[test]
    fn rejection_is_monotone_and_conserves_counts(
        scores in prop::collection::vec((0.0..=1.0f64, any::<bool>()), 1..100),
        mut alphas in prop::collection::vec(0.0..=1.0f64, 1..10),
    ) {
        alphas.sort_by(f64::total_cmp);
        let summaries: Vec<InputSummary> = scores.iter().map(|&(u, ok)| summary(u, ok)).collect();
        let rows = rejection_rows(&summaries, &alphas).unwrap();
        for w in rows.windows(2) {
            prop_assert!(w[1].discarded_fraction <= w[0].discarded_fraction);
        }
        for r in &rows {
            prop_assert_eq!(r.discarded + r.retained, scores.len());
            for f in [r.discarded_fraction, r.accuracy_retained, r.error_rate_discarded, r.error_rate_retained] {
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }
    }

    #[test]
    fn histogram_counts_everything(values in prop::collection::vec(0.0..=1.0f64, 0..300), bins in 1..30usize) {
        prop_assert_eq!(histogram(&values, bins).iter().sum::<usize>(), values.len());
    }

    #[test]
    fn idx_round_trip_and_monotone_preprocessing(pixels in prop::collection::vec(any::<u8>(), 3 * 16), labels in prop::collection::vec(0..10u8, 3)) {
        let raw = RawImages { rows: 4, cols: 4, pixels, labels };
        let (im, lb) = raw.to_idx_bytes();
        let back = parse_idx(&im, &lb).unwrap();
        prop_assert_eq!(&back, &raw);
        let ds = preprocess(&raw, 4).unwrap();
        let x = ds.inputs.data();
        for (k, &p) in raw.pixels.iter().enumerate() {
            prop_assert!((-1.0..=1.0).contains(&x[k]));
            if p == 0 { prop_assert_eq!(x[k], -1.0); }
            if p == 255 { prop_assert_eq!(x[k], 1.0); }
            for (j, &q) in raw.pixels.iter().enumerate() {
                if p < q { prop_assert!(x[k] < x[j]); }
            }
        }
    }

    #[test]
    fn config_render_parse_round_trip(
        centers in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 2..5),
        n in 1..500usize,
        spread in 0.001..1.0f64,
        hidden in prop::collection::vec(1..300usize, 1..4),
        latent in 2..30usize,
        variational in any::<bool>(),
        deterministic in any::<bool>(),
        taus in prop::collection::vec(0.0..20.0f64, 4),
        lr in 1e-6..1e-1f64,
        seed in any::<u64>(),
        scale in 0.01..3.0f64,
    ) {
        let mut c = RunConfig::new(DatasetSpec::Synth2d(Synth2dSpec {
            centers: centers.iter().map(|&(x, y)| [x, y]).collect(),
            n_per_class: n,
            test_per_class: n / 2 + 1,
            spread,
            ood_shift: None,
        }));
        c.train.seed = seed;
        c.train.lr = lr;
        c.train.prototype_init_scale = scale;
        c.train.backbone.kind = BackboneKind::Mlp;
        c.train.backbone.hidden_sizes = hidden;
        c.train.backbone.latent_dim = latent;
        c.train.backbone.variational = variational;
        c.train.mode = if deterministic { PrototypeMode::Deterministic } else { PrototypeMode::Probabilistic };
        c.train.weights.tau1 = taus[0];
        c.train.weights.tau2 = taus[1];
        c.train.weights.tau3 = taus[2];
        c.train.weights.tau4 = taus[3];
        let text = render_config(&c);
        prop_assert_eq!(parse_config(&text).unwrap(), c, "{}", text);
    }
}
