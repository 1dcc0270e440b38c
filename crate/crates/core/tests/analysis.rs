use ilflow_core::analysis::{exact_rkl, random_mdp, random_policy, verify_entropy_decomposition};
use ilflow_core::seeding;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sequence_entropy_is_sum_of_step_entropies(
        seed in any::<u64>(),
        states in 1usize..=4,
        actions in 1usize..=3,
        horizon in 1usize..=5,
        sparsity in 0.0f64..0.6,
    ) {
        let mut rng = seeding::rng(seed, 0);
        let mdp = random_mdp(states, actions, horizon, sparsity, &mut rng);
        let pi = random_policy(states, actions, sparsity, &mut rng);
        let r = verify_entropy_decomposition(&mdp, &pi).unwrap();
        prop_assert!(r.abs_diff < 1e-12, "{:?}", r);
        prop_assert!(r.lhs >= -1e-12);
    }

    #[test]
    fn rkl_recombines_from_cross_and_entropy_terms(
        seed in any::<u64>(),
        states in 1usize..=4,
        actions in 1usize..=3,
        horizon in 1usize..=5,
    ) {
        let mut rng = seeding::rng(seed, 1);
        let mdp = random_mdp(states, actions, horizon, 0.0, &mut rng);
        let pi = random_policy(states, actions, 0.0, &mut rng);
        let ex = random_policy(states, actions, 0.0, &mut rng);
        let r = exact_rkl(&mdp, &pi, &ex).unwrap();
        prop_assert!(!r.infinite);
        prop_assert!(r.rkl >= -1e-12);
        prop_assert!((r.rkl - r.recombined()).abs() < 1e-12, "{:?}", r);
        prop_assert_eq!(exact_rkl(&mdp, &pi, &pi).unwrap().rkl, 0.0);
    }
}
