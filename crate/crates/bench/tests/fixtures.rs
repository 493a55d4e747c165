use ifast_bench::{market, sca_contracts};

#[test]
fn fixtures_are_valid_and_stable() {
    let sc = market(6, 2, 1);
    sc.validate().unwrap();
    assert_eq!((sc.sellers.len(), sc.buyers.len()), (6, 2));
    assert_eq!(sc.risk_bounds, ifast_core::RiskBounds::uniform(0.35));
    assert_eq!(sca_contracts(&sc, 1), sca_contracts(&sc, 1));
}
