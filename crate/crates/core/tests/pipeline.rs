use std::path::Path;

use ifast_core::benchmarks::{run_mc_random, run_quality_prefer};
use ifast_core::campaign::realizations;
use ifast_core::io::{generate_synthetic, parse_config, CampaignConfig, ScenarioSource, SyntheticSpec};
use ifast_core::rng::{stream, Purpose};
use ifast_core::{
    build_problem_with, estimate_risks_mc, execute_transaction, solve_sca, ProblemOptions, ScaParams, Scenario,
    SpotConfig, TransactionOutcome,
};
use proptest::prelude::*;

fn market(sellers: u32, buyers: u32, seed: u64) -> Scenario {
    let spec = SyntheticSpec {
        sellers,
        buyers,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, seed).unwrap()
}

fn check_safety(sc: &Scenario, o: &TransactionOutcome) {
    assert!(o.ledger.balanced(), "{:?}", o.ledger);
    for s in &sc.sellers {
        let tasks = o.seller_totals.get(&s.id).map_or(0, |t| t.tasks);
        assert!(tasks <= s.capacity, "seller {:?} served {tasks}", s.id);
    }
    for b in &sc.buyers {
        if let Some(t) = o.buyer_totals.get(&b.id) {
            let room = (b.budget - t.forward_payment).max(0.0);
            assert!(t.spot_payment <= room + 1e-9, "buyer {:?} spot {} room {room}", b.id, t.spot_payment);
            assert!((t.payment - t.forward_payment - t.spot_payment).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_then_spot_keeps_every_invariant(
        sellers in 2u32..9,
        buyers in 1u32..4,
        seed in 0u64..1_000,
    ) {
        let sc = market(sellers, buyers, seed);
        let problem = build_problem_with(&sc, ProblemOptions { samples: 300, certify_samples: 600, seed }).unwrap();
        let result = solve_sca(&problem, ScaParams::default()).unwrap();
        for c in &result.contracts.contracts {
            prop_assert!(c.price > 0.0);
        }
        let risks = estimate_risks_mc(&sc, &result.contracts, 500, seed).unwrap();
        prop_assert!(risks.probabilities().all(|p| (0.0..=1.0).contains(&p)));

        let cfg = SpotConfig::from_scenario(&sc);
        let mut rng = stream(seed, Purpose::McRandom, 0);
        for r in realizations(&sc, seed, 20) {
            let o = execute_transaction(&sc, &result.contracts, &r, &cfg).unwrap();
            check_safety(&sc, &o);
            // spot recruitment only adds quality
            for (b, t) in &o.buyer_totals {
                let fwd = o.fulfillment.buyer_quality.get(b).copied().unwrap_or(0.0);
                prop_assert!(t.quality >= fwd - 1e-9);
            }
            check_safety(&sc, &run_quality_prefer(&sc, &r).unwrap());
            check_safety(&sc, &run_mc_random(&sc, &r, &mut rng).unwrap());
        }
    }

    #[test]
    fn resolved_config_reloads_to_itself(
        seed in 0u64..u64::from(u32::MAX),
        transactions in 1u64..1_000,
        sellers in 1u32..30,
        buyers in 1u32..12,
        eps in 0.0f64..1.0,
    ) {
        let spec = SyntheticSpec { sellers, buyers, ..SyntheticSpec::default() };
        let mut cfg = CampaignConfig::new(seed, ScenarioSource::Synthetic { spec, seed });
        cfg.transactions = transactions;
        cfg.risk = ifast_core::RiskBounds::uniform(eps);
        cfg.output_dir = "/tmp/ifast-out".into();
        let back = parse_config(&cfg.to_toml(), Path::new("/")).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
