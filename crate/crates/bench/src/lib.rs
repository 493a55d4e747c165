//! Fixtures shared by the criterion benches.

use ifast_core::io::{generate_synthetic, SyntheticSpec};
use ifast_core::{build_problem_with, solve_sca, ContractSet, ProblemOptions, RiskBounds, ScaParams, Scenario};

/// A synthetic market at ε = 0.35 with default parameter ranges.
pub fn market(sellers: u32, buyers: u32, seed: u64) -> Scenario {
    let spec = SyntheticSpec {
        sellers,
        buyers,
        ..SyntheticSpec::default()
    };
    let mut sc = generate_synthetic(&spec, seed).expect("default ranges are valid");
    sc.risk_bounds = RiskBounds::uniform(0.35);
    sc
}

/// Search-path options small enough to keep one iteration short.
pub fn options(seed: u64) -> ProblemOptions {
    ProblemOptions {
        samples: 500,
        certify_samples: 2000,
        seed,
    }
}

/// The SCA contract set for `scenario` (best effort if infeasible).
pub fn sca_contracts(scenario: &Scenario, seed: u64) -> ContractSet {
    let problem = build_problem_with(scenario, options(seed)).expect("valid scenario");
    solve_sca(&problem, ScaParams::default()).expect("sca has no resource guard").contracts
}
