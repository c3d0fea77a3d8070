mod common;

use common::oracles::*;

#[test]
fn sampling_moments_match_parameters() {
    for (seed, l) in [(1, 2), (2, 3), (3, 5)] {
        let m = sampling_moments(seed, l, 100_000);
        assert!(m.mean_z < 3.0, "l={l}: mean off by {} SE", m.mean_z);
        assert!(m.cov_rel < 0.05, "l={l}: covariance error {}", m.cov_rel);
    }
}

#[test]
fn log_density_matches_closed_form() {
    let err = log_density_error(7, 200);
    assert!(err < 1e-10, "{err:e}");
}

#[test]
fn density_integrates_to_one_in_two_dimensions() {
    for seed in 0..10 {
        let total = density_integral_2d(seed, 201);
        assert!((total - 1.0).abs() < 0.01, "seed {seed}: {total}");
    }
}

#[test]
fn kde_recovers_normal_mode() {
    let err = kde_mode_error(11, 10_000);
    assert!(err < 0.03, "{err}");
}

#[test]
fn overlap_of_identical_and_disjoint_sets() {
    let (same, apart) = overlap_identical_disjoint(12, 500);
    assert!((same - 1.0).abs() < 0.02, "{same}");
    assert!(apart.abs() < 0.02, "{apart}");
}

#[test]
fn entropy_decomposition_identity() {
    let d = decomposition(13, 1000);
    assert!(d.identity_error < 1e-10, "{:e}", d.identity_error);
    assert!(d.min_mi >= -1e-12, "{:e}", d.min_mi);
}
