mod common;

use common::checks::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_ignores_point_order(seed in any::<u64>()) {
        prop_assert!(permutation_error(2, seed) < 1e-6);
    }

    #[test]
    fn selection_copies_whole_vectors(seed in any::<u64>()) {
        prop_assert_eq!(exact_copy_violations(4, seed), 0);
    }

    #[test]
    fn selection_agrees_with_loop(seed in any::<u64>()) {
        prop_assert_eq!(selection_mismatches(4, seed), 0);
    }

    #[test]
    fn align_is_exact_on_affine_latitude_profiles(seed in any::<u64>()) {
        prop_assert!(align_error(4, seed) < 1e-12);
    }

    #[test]
    fn spectral_output_is_band_limited(seed in any::<u64>()) {
        prop_assert!(truncation_leak(2, seed) < 1e-10);
    }

    #[test]
    fn nll_is_minimised_at_the_truth(mu in -5.0f64..5.0, v in 0.01f64..10.0, d in -3.0f64..3.0) {
        let at = fnp_core::decoder::gaussian_nll_values(&[mu], &[v], &[mu]).unwrap();
        let off = fnp_core::decoder::gaussian_nll_values(&[mu + d], &[v], &[mu]).unwrap();
        prop_assert!(at <= off);
    }

    #[test]
    fn analysis_minimises_cost(seed in any::<u64>(), n in 1usize..12, m in 1usize..12) {
        let mut r = common::rng(seed);
        let p = random_problem(&mut r, n, m);
        let xa = p.analytic_analysis().unwrap();
        let ja = p.cost(&xa).unwrap();
        let shift = nalgebra::DVector::from_fn(n, |i, _| ((i as f64) * 0.37).sin() * 0.01);
        prop_assert!(ja <= p.cost(&(&xa + shift)).unwrap());
        prop_assert!(ja <= p.cost(&p.x_b).unwrap());
    }
}
