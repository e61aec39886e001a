mod common;

use apfa_core::automaton::isomorphism;
use apfa_core::dataset::{read_dataset, write_dataset, ReadOptions};
use apfa_core::inference::nested_test;
use apfa_core::io::ApfaDocument;
use apfa_core::merging::{merge, merge_list, merge_list_recursive};
use apfa_core::selection::{replay, select_from, SelectionConfig};
use apfa_core::{fit_mle, sample_apfa};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sweep_and_recursive_merge_lists_agree(seed in any::<u64>(), p in 2usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = common::random_binary_apfa(&mut rng, p, 4, 30);
        if let Some(pair) = common::random_pair(&mut rng, &a) {
            prop_assert_eq!(merge_list(&a, &pair).unwrap(), merge_list_recursive(&a, &pair).unwrap());
        }
    }

    #[test]
    fn merging_lowers_the_likelihood_and_keeps_the_total(seed in any::<u64>(), p in 2usize..=4, n in 10usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = common::random_dataset(&mut rng, p, 3, n);
        let c = sample_apfa(&d).unwrap();
        let f = fit_mle(&c);
        prop_assert!((f.log_likelihood() - common::brute_force_loglik(&f, &d)).abs() < 1e-9);
        if let Some(pair) = common::random_pair(&mut rng, c.apfa()) {
            let c0 = merge(&c, &pair).unwrap();
            prop_assert_eq!(c0.total(), c.total());
            let f0 = fit_mle(&c0);
            prop_assert!(f0.log_likelihood() <= f.log_likelihood() + 1e-9);
            let t = nested_test(&c, &c0).unwrap();
            prop_assert!(t.g2 >= 0.0);
            prop_assert!(u128::from(t.df_adjusted) <= t.df_unadjusted.unwrap());
        }
    }

    #[test]
    fn selection_trace_is_consistent(seed in any::<u64>(), p in 2usize..=4, n in 20usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = common::random_dataset(&mut rng, p, 3, n);
        let c = sample_apfa(&d).unwrap();
        let s = select_from(&c, &SelectionConfig::bic()).unwrap();
        let mut ic = s.trace.initial_ic;
        prop_assert!((ic - fit_mle(&c).bic()).abs() < 1e-9);
        for step in &s.trace.steps {
            prop_assert_eq!(step.ic_before, ic);
            prop_assert!(step.score < 0.0 || step.zero_df);
            ic = step.ic_after;
        }
        prop_assert!((ic - s.model.bic()).abs() < 1e-6);
        let again = replay(&c, &s.trace).unwrap();
        prop_assert!(isomorphism(again.apfa(), s.model.counted().apfa()).is_some());
    }

    #[test]
    fn csv_and_json_round_trip(seed in any::<u64>(), p in 1usize..=5, n in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = common::random_dataset(&mut rng, p, 3, n);
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf, false).unwrap();
        let back = read_dataset(buf.as_slice(), &ReadOptions::default()).unwrap();
        prop_assert!(back.rows().eq(d.rows()));

        let fitted = fit_mle(&sample_apfa(&d).unwrap());
        let doc = ApfaDocument::from_fitted(&fitted);
        let again = ApfaDocument::from_json(&doc.to_json()).unwrap();
        prop_assert_eq!(again.to_apfa().unwrap(), fitted.apfa().clone());
    }
}
