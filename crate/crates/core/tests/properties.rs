//! Randomized invariants over small generated models.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dbnplan_core::bp::{dbn_marginals, forward_value, BpConfig};
use dbnplan_core::csvi::{estimate_log_g, CsviConfig, TrajectorySampler};
use dbnplan_core::domain::builtin::{random_chain, random_mdp, RandomMdpShape};
use dbnplan_core::domain::{parse_domain, structural_diff, write_domain};
use dbnplan_core::exact::{policy_return, ExactOracle};
use dbnplan_core::forward::{build_forward_graph, random_policy};
use dbnplan_core::mfvi::{MeanField, VariationalPosterior};
use dbnplan_core::{unroll, EvidenceMode, FactoredMdp, StartState};

fn shape() -> impl Strategy<Value = (RandomMdpShape, u64)> {
    (1usize..=4, 1usize..=2, 1usize..=3, any::<bool>(), any::<u64>()).prop_map(|(m, n, k, synchronic, seed)| {
        let shape = RandomMdpShape {
            state_vars: m,
            action_vars: n,
            reward_factors: k,
            synchronic,
            ..Default::default()
        };
        (shape, seed)
    })
}

fn mode() -> impl Strategy<Value = EvidenceMode> {
    prop_oneof![Just(EvidenceMode::Terminal), Just(EvidenceMode::Exponentiated)]
}

fn start(mdp: &FactoredMdp) -> StartState {
    StartState::from_mdp(mdp)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn written_models_reparse((shape, seed) in shape()) {
        let mdp = random_mdp(&shape, seed);
        let again = parse_domain(&write_domain(&mdp)).unwrap();
        prop_assert_eq!(structural_diff(&mdp, &again), None);
    }

    #[test]
    fn unrolled_tables_are_distributions((shape, seed) in shape(), t in 1usize..=4, mode in mode()) {
        let mdp = random_mdp(&shape, seed);
        let dbn = unroll(&mdp, &start(&mdp), t, mode).unwrap();
        for node in &dbn.nodes {
            for config in 0..node.num_configs() {
                let row: f64 = (0..node.card).map(|v| node.prob(config, v)).sum();
                prop_assert!((row - 1.0).abs() < 1e-12, "{} row {config} sums to {row}", node.label);
                prop_assert!((0..node.card).all(|v| node.prob(config, v) >= 0.0));
            }
        }
    }

    #[test]
    fn terminal_success_is_affine_in_return((shape, seed) in shape(), t in 1usize..=4, pseed in any::<u64>()) {
        let mdp = random_mdp(&shape, seed);
        let (lo, hi) = mdp.reward_range();
        prop_assume!(hi > lo);
        let theta = random_policy(&mdp.action_cards(), t, &mut ChaCha8Rng::seed_from_u64(pseed));
        let dbn = unroll(&mdp, &start(&mdp), t, EvidenceMode::Terminal).unwrap().with_policy(&theta);
        let ct = ExactOracle::new(&dbn).prior_cumulative(t).unwrap();
        let k = mdp.rewards.len() as f64;
        let ret = policy_return(&mdp, &start(&mdp), &theta).unwrap();
        let expect = (ret - t as f64 * k * lo) / (t as f64 * k * (hi - lo));
        prop_assert!((ct - expect).abs() < 1e-12, "{ct} vs {expect}");
    }

    #[test]
    fn bp_matches_the_oracle_on_chains(m in 1usize..=4, t in 1usize..=4, seed in any::<u64>(), pseed in any::<u64>()) {
        let mdp = random_chain(m, seed);
        let theta = random_policy(&mdp.action_cards(), t, &mut ChaCha8Rng::seed_from_u64(pseed));
        let dbn = unroll(&mdp, &start(&mdp), t, EvidenceMode::Terminal).unwrap().with_policy(&theta);
        let exact = ExactOracle::new(&dbn);
        let bp = dbn_marginals(&dbn, &BpConfig::default()).unwrap();
        for id in dbn.latent_nodes() {
            let ex = exact.posterior(id).unwrap();
            for (a, b) in bp.marginals[id].iter().zip(&ex) {
                prop_assert!((a - b).abs() < 1e-9, "{}: {a} vs {b}", dbn.node(id).label);
            }
        }
    }

    #[test]
    fn forward_graph_is_a_probability((shape, seed) in shape(), t in 1usize..=4, pseed in any::<u64>()) {
        let mdp = random_mdp(&shape, seed);
        let theta = random_policy(&mdp.action_cards(), t, &mut ChaCha8Rng::seed_from_u64(pseed));
        let dbn = unroll(&mdp, &start(&mdp), t, EvidenceMode::Terminal).unwrap();
        let v = build_forward_graph(&dbn).evaluate(&theta);
        prop_assert!((0.0..=1.0).contains(&v));
        let bp = forward_value(&dbn.with_policy(&theta), &BpConfig::default()).unwrap();
        prop_assert!((v - bp).abs() < 1e-9);
    }

    #[test]
    fn mean_field_updates_never_lower_the_elbo(
        (shape, seed) in shape(),
        t in 1usize..=3,
        mode in mode(),
        qseed in any::<u64>(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..40),
    ) {
        let mdp = random_mdp(&shape, seed);
        let dbn = unroll(&mdp, &start(&mdp), t, mode).unwrap();
        let mf = MeanField::new(&dbn);
        let mut q = VariationalPosterior::init(&dbn);
        let latent: Vec<usize> = dbn.latent_nodes().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(qseed);
        for &id in &latent {
            let d = random_policy(&[dbn.node(id).card], 1, &mut rng);
            q.set_dist(id, &d.dist(0, 0));
        }
        let mut before = mf.elbo(&q);
        for pick in picks {
            let id = latent[pick.index(latent.len())];
            let reported = mf.update(&mut q, id);
            let after = mf.elbo(&q);
            prop_assert!(after - before >= -1e-9, "update of {} lowered the ELBO by {}", dbn.node(id).label, before - after);
            prop_assert!((after - before - reported).abs() < 1e-8);
            prop_assert!(q.is_valid());
            before = after;
        }
    }

    #[test]
    fn collapsed_estimate_is_a_finite_log_probability((shape, seed) in shape(), t in 1usize..=3, mode in mode(), rseed in any::<u64>()) {
        let mdp = random_mdp(&shape, seed);
        let dbn = unroll(&mdp, &start(&mdp), t, mode).unwrap();
        let sampler = TrajectorySampler::new(&dbn);
        let q = random_policy(&mdp.action_cards(), t, &mut ChaCha8Rng::seed_from_u64(rseed));
        let cfg = CsviConfig { m2: 20, ..Default::default() };
        let g = estimate_log_g(&sampler, &q, None, &cfg, &mut ChaCha8Rng::seed_from_u64(rseed));
        prop_assert!(g.is_finite() && g < 0.0, "{g}");
    }
}
