mod common;

use common::oracles::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retinakit::metrics;

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let out = run_metric_oracles(200, 11);
    assert!(out.failures.is_empty(), "{:#?}", out.failures);
    assert!(out.checked >= 200 * 5);
}

#[test]
fn oracles_agree_on_hand_cases() {
    let labels = [true, false, true, false];
    let scores = [0.9, 0.8, 0.7, 0.1];
    assert_eq!(auc_roc(&scores, &labels), 0.75);
    assert_eq!(metrics::auc_roc(&scores, &labels).unwrap(), 0.75);
    assert_eq!(quadratic_weighted_kappa(&[0, 1, 2], &[0, 1, 2]), 1.0);
    assert_eq!(cohens_kappa(&[1, 0, 0, 0], &[1, 1, 0, 0]), 0.5);
}

#[test]
fn qwk_is_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (p, g) = rating_instance(&mut rng, 5);
        if let (Ok(a), Ok(b)) = (
            metrics::quadratic_weighted_kappa(&p, &g, 5),
            metrics::quadratic_weighted_kappa(&g, &p, 5),
        ) {
            assert!((a - b).abs() < 1e-12);
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
        }
    }
}
