//! Chance-constrained 0-1 contract assignment.
//!
//! Prices are fixed up front at `(1 + margin) · E[cost]`, which turns the
//! sellers' profit objective into a constraint that holds by construction and
//! leaves a single objective: expected total buyer quality. What remains is a
//! choice, per seller, of which `(buyer, level)` pairs to sign, subject to the
//! risk bounds, the per-seller contract cap and the buyer overbooking cap.
//!
//! Candidates are evaluated on a common-random-number sample path so every
//! solver compares them on identical randomness.

mod exact;
mod sca;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use exact::{solve_exact_ie, solve_exact_with, ExactGuards};
pub use sca::{gaussian_surrogates, round_and_repair, solve_sca, RelaxedPoint, ScaParams, Surrogates};

use crate::error::Result;
use crate::market::{
    contract_price, expected_cost, expected_quality, BuyerId, BuyerProfile, ContractSet, ForwardContract, Level,
    Realization, RiskBounds, Scenario, SellerId, SellerProfile, StructuralLimits,
};
use crate::risk::{
    accumulate_seller, compile_contract, risks_on_path, sort_by_rank, CompiledContract, RiskReport, SamplePath,
};
use crate::rng::Purpose;

/// Slack allowed between the search-time risk estimate and an independent
/// re-evaluation with a fresh seed.
pub const FEASIBILITY_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemOptions {
    /// Size of the common-random-number path used during search.
    pub samples: u64,
    /// Size of the independent path used to certify the final answer.
    pub certify_samples: u64,
    pub seed: u64,
}

impl Default for ProblemOptions {
    fn default() -> Self {
        ProblemOptions {
            samples: 2000,
            certify_samples: 10_000,
            seed: 0x1f_a57,
        }
    }
}

/// One `(seller, buyer, level)` decision variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub seller: usize,
    pub buyer: usize,
    pub level: Level,
    pub price: f64,
    /// E[realized quality] if delivered.
    pub expected_quality: f64,
    /// attendance · E[quality]: the optimistic contribution and the
    /// booked-quality term of the buyer overbooking rate.
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardProblem {
    pub scenario: Scenario,
    pub prices: BTreeMap<(SellerId, BuyerId, Level), f64>,
    pub margin: f64,
    pub options: ProblemOptions,
    /// Sorted by `(seller id, buyer id, level)`.
    pub candidates: Vec<Candidate>,
    /// Per seller, every admissible contract set (candidate indices), the
    /// empty set first.
    pub alphabet: Vec<Vec<Vec<usize>>>,
    pub path: SamplePath,
    certify_path: Option<SamplePath>,
}

/// Enumerates subsets of size ≤ `cap` drawn from `by_buyer`, at most one
/// level per buyer.
fn enumerate_choices(by_buyer: &[Vec<usize>], cap: usize) -> Vec<Vec<usize>> {
    fn rec(by_buyer: &[Vec<usize>], start: usize, cap: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(cur.clone());
        if cur.len() == cap {
            return;
        }
        for b in start..by_buyer.len() {
            for &c in &by_buyer[b] {
                cur.push(c);
                rec(by_buyer, b + 1, cap, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(by_buyer, 0, cap, &mut Vec::new(), &mut out);
    out
}

/// Largest alphabet built eagerly; bigger instances leave it empty and only
/// the relaxation-based solver applies.
const MAX_ALPHABET_PER_SELLER: usize = 200_000;

fn alphabet_size(n_buyers: usize, levels: usize, cap: usize) -> usize {
    // Σ_k C(n, k) · levels^k
    let mut total = 0usize;
    let mut binom = 1usize;
    let mut pow = 1usize;
    for k in 0..=cap.min(n_buyers) {
        total = total.saturating_add(binom.saturating_mul(pow));
        binom = binom.saturating_mul(n_buyers - k) / (k + 1);
        pow = pow.saturating_mul(levels);
    }
    total
}

impl ForwardProblem {
    fn assemble(scenario: Scenario, margin: f64, options: ProblemOptions, path: SamplePath, certify_path: Option<SamplePath>) -> Self {
        let xi = scenario.econ.xi;
        let kappa = scenario.econ.kappa;
        let mut candidates = Vec::new();
        let mut prices = BTreeMap::new();
        let mut seller_order: Vec<usize> = (0..scenario.sellers.len()).collect();
        seller_order.sort_by_key(|&i| scenario.sellers[i].id);
        for &si in &seller_order {
            let s = &scenario.sellers[si];
            let el = s.workload.expected_value();
            for (bid, &q) in &s.q_plus {
                let Some(bi) = scenario.buyer_index(*bid) else { continue };
                let c = s.base_cost[bid];
                for level in Level::ALL {
                    let price = contract_price(level, c, kappa, el, margin);
                    let eq = expected_quality(level, q, xi, &s.workload);
                    prices.insert((s.id, *bid, level), price);
                    candidates.push(Candidate {
                        seller: si,
                        buyer: bi,
                        level,
                        price,
                        expected_quality: eq,
                        value: s.attendance_prob * eq,
                    });
                }
            }
        }
        let cap = scenario.limits.max_contracts_per_seller as usize;
        let alphabet = (0..scenario.sellers.len())
            .map(|si| {
                let mut by_buyer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (ci, c) in candidates.iter().enumerate() {
                    if c.seller == si {
                        by_buyer.entry(c.buyer).or_default().push(ci);
                    }
                }
                let mut groups: Vec<Vec<usize>> = by_buyer.into_values().collect();
                groups.sort_by_key(|g| g[0]);
                if alphabet_size(groups.len(), 2, cap) > MAX_ALPHABET_PER_SELLER {
                    return Vec::new();
                }
                enumerate_choices(&groups, cap)
            })
            .collect();
        ForwardProblem {
            scenario,
            prices,
            margin,
            options,
            candidates,
            alphabet,
            path,
            certify_path,
        }
    }

    /// Whether every seller's alphabet was enumerated.
    pub fn alphabet_complete(&self) -> bool {
        self.alphabet.iter().all(|a| !a.is_empty())
    }

    pub fn candidate(&self, seller: SellerId, buyer: BuyerId, level: Level) -> Option<usize> {
        self.candidates.iter().position(|c| {
            self.scenario.sellers[c.seller].id == seller && self.scenario.buyers[c.buyer].id == buyer && c.level == level
        })
    }

    /// Per-candidate expected profit `price − E[cost]`; all non-negative when
    /// the margin is.
    pub fn expected_profits(&self) -> Vec<f64> {
        self.candidates
            .iter()
            .map(|c| {
                let s = &self.scenario.sellers[c.seller];
                let b = self.scenario.buyers[c.buyer].id;
                c.price - expected_cost(c.level, s.base_cost[&b], self.scenario.econ.kappa, s.workload.expected_value())
            })
            .collect()
    }

    pub fn profit_constraint_holds(&self) -> bool {
        self.expected_profits().iter().all(|&p| p >= -1e-12)
    }

    pub fn bounds(&self) -> &RiskBounds {
        &self.scenario.risk_bounds
    }

    /// `(1 + O_max) · required_quality` for each buyer.
    pub fn booked_quality_cap(&self) -> Vec<f64> {
        let o = self.scenario.limits.max_buyer_overbooking;
        self.scenario.buyers.iter().map(|b| (1.0 + o) * b.required_quality).collect()
    }

    pub fn contracts_from(&self, chosen: &[usize]) -> ContractSet {
        let penalty = self.scenario.econ.default_penalty;
        ContractSet::new(
            chosen
                .iter()
                .map(|&ci| {
                    let c = &self.candidates[ci];
                    ForwardContract {
                        seller_id: self.scenario.sellers[c.seller].id,
                        buyer_id: self.scenario.buyers[c.buyer].id,
                        level: c.level,
                        price: c.price,
                        penalty,
                    }
                })
                .collect(),
        )
    }

    fn compiled_choice(&self, chosen: &[usize]) -> Vec<CompiledContract> {
        let penalty = self.scenario.econ.default_penalty;
        let mut list: Vec<CompiledContract> = chosen
            .iter()
            .map(|&ci| {
                let c = &self.candidates[ci];
                compile_contract(&self.scenario, c.seller, c.buyer, c.level, c.price, penalty)
            })
            .collect();
        sort_by_rank(&mut list);
        list
    }

    /// Contribution of one seller's contract set on the sample path.
    pub(crate) fn seller_eval(&self, seller: usize, chosen: &[usize]) -> SellerEval {
        let nb = self.scenario.buyers.len();
        let ns = self.path.len();
        let list = self.compiled_choice(chosen);
        let mut eval = SellerEval {
            quality: vec![0.0; ns * nb],
            payment: vec![0.0; ns * nb],
            losses: 0,
            mean_quality: 0.0,
        };
        if list.is_empty() {
            return eval;
        }
        let mut total = 0.0;
        for (k, r) in self.path.realizations.iter().enumerate() {
            let q = &mut eval.quality[k * nb..(k + 1) * nb];
            let p = &mut eval.payment[k * nb..(k + 1) * nb];
            let tally = accumulate_seller(&self.scenario, seller, &list, r, q, p);
            if tally.is_loss() {
                eval.losses += 1;
            }
            total += q.iter().sum::<f64>();
        }
        eval.mean_quality = total / ns.max(1) as f64;
        eval
    }

    /// Risks and objective of `contracts` on the search path, plus the
    /// independent certificate when the path is random.
    pub(crate) fn finish(&self, contracts: ContractSet, search_feasible: bool) -> Result<Finished> {
        let risk_report = risks_on_path(&self.scenario, &contracts, &self.path)?;
        let per_buyer = crate::risk::expected_quality_on_path(&self.scenario, &contracts, &self.path)?;
        let objective = per_buyer.values().sum();
        let certificate = match &self.certify_path {
            Some(path) => Some(risks_on_path(&self.scenario, &contracts, path)?),
            None => None,
        };
        let bounds = self.bounds();
        let certified = certificate.as_ref().is_none_or(|c| c.within(bounds, FEASIBILITY_TOLERANCE));
        let feasible = search_feasible && risk_report.within(bounds, 0.0) && certified;
        Ok(Finished {
            contracts,
            objective,
            feasible,
            risk_report,
            certificate,
        })
    }

    /// Per-transaction problem for spot-time baselines: only present
    /// participants, everything already realized, spot pricing, budgets hard,
    /// no shortfall constraint (quality enters through the objective).
    pub fn for_realization(scenario: &Scenario, realization: &Realization) -> (ForwardProblem, SpotIndex) {
        let sellers: Vec<usize> = (0..scenario.sellers.len()).filter(|&i| realization.seller_present[i]).collect();
        let buyers: Vec<usize> = (0..scenario.buyers.len()).filter(|&i| realization.buyer_present[i]).collect();
        let buyer_ids: Vec<BuyerId> = buyers.iter().map(|&i| scenario.buyers[i].id).collect();
        let sub_sellers: Vec<SellerProfile> = sellers
            .iter()
            .map(|&i| {
                let s = &scenario.sellers[i];
                SellerProfile {
                    attendance_prob: 1.0,
                    q_plus: s.q_plus.iter().filter(|(b, _)| buyer_ids.contains(b)).map(|(b, q)| (*b, *q)).collect(),
                    base_cost: s.base_cost.iter().filter(|(b, _)| buyer_ids.contains(b)).map(|(b, c)| (*b, *c)).collect(),
                    ..s.clone()
                }
            })
            .collect();
        let sub_buyers: Vec<BuyerProfile> = buyers
            .iter()
            .map(|&i| BuyerProfile {
                attendance_prob: 1.0,
                ..scenario.buyers[i].clone()
            })
            .collect();
        let max_capacity = sub_sellers.iter().map(|s| s.capacity).max().unwrap_or(1);
        let sub = Scenario {
            sellers: sub_sellers,
            buyers: sub_buyers,
            econ: scenario.econ,
            risk_bounds: RiskBounds {
                eps_shortfall: 1.0,
                eps_budget: 0.0,
                eps_seller_loss: 1.0,
            },
            limits: StructuralLimits {
                max_contracts_per_seller: max_capacity,
                max_buyer_overbooking: scenario.limits.max_buyer_overbooking,
            },
        };
        let realized = Realization {
            transaction_index: realization.transaction_index,
            seller_present: vec![true; sellers.len()],
            buyer_present: vec![true; buyers.len()],
            workloads: sellers.iter().map(|&i| realization.workloads[i]).collect(),
        };
        let margin = scenario.econ.spot_margin;
        let problem = ForwardProblem::assemble(
            sub,
            margin,
            ProblemOptions {
                samples: 1,
                certify_samples: 0,
                seed: 0,
            },
            SamplePath::realized(vec![realized]),
            None,
        );
        (problem, SpotIndex { sellers, buyers })
    }
}

/// Maps a per-transaction problem back onto the full scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotIndex {
    pub sellers: Vec<usize>,
    pub buyers: Vec<usize>,
}

pub(crate) struct Finished {
    pub contracts: ContractSet,
    pub objective: f64,
    pub feasible: bool,
    pub risk_report: RiskReport,
    pub certificate: Option<RiskReport>,
}

/// Per-sample contribution of one seller's contract set, laid out
/// `[sample][buyer]`.
#[derive(Debug, Clone)]
pub(crate) struct SellerEval {
    pub quality: Vec<f64>,
    pub payment: Vec<f64>,
    pub losses: u64,
    pub mean_quality: f64,
}

/// Fixes prices at the forward margin and builds the decision alphabet.
pub fn build_problem(scenario: &Scenario) -> Result<ForwardProblem> {
    build_problem_with(scenario, ProblemOptions::default())
}

pub fn build_problem_with(scenario: &Scenario, options: ProblemOptions) -> Result<ForwardProblem> {
    scenario.validate()?;
    let path = SamplePath::monte_carlo(scenario, options.samples, options.seed, Purpose::RiskSample)?;
    let certify = if options.certify_samples > 0 {
        Some(SamplePath::monte_carlo(scenario, options.certify_samples, options.seed, Purpose::Certify)?)
    } else {
        None
    };
    Ok(ForwardProblem::assemble(
        scenario.clone(),
        scenario.econ.forward_margin,
        options,
        path,
        certify,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Sca,
    Exact,
}

/// One outer iteration of a solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u32,
    pub objective: f64,
    pub violation: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub solver: SolverKind,
    pub contracts: ContractSet,
    pub objective: f64,
    pub feasible: bool,
    pub risk_report: RiskReport,
    /// Re-evaluation on an independent sample path (random problems only).
    pub certificate: Option<RiskReport>,
    pub solver_trace: Vec<TraceRow>,
    #[serde(with = "duration_secs")]
    pub wall_time: Duration,
    pub converged: bool,
    pub nodes: u64,
    pub warnings: Vec<String>,
}

impl SolveResult {
    /// Trace as a comma-separated table with a header row.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,objective,violation,step_norm\n");
        for r in &self.solver_trace {
            out.push_str(&format!("{},{},{},{}\n", r.iteration, r.objective, r.violation, r.step_norm));
        }
        out
    }
}

pub(crate) mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(secs.max(0.0)))
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::market::{EconomicParams, TruncatedGaussianSpec};

    /// Two sellers, one buyer; the optimum signs both at the plus level.
    pub fn instance_a(attendance: f64) -> Scenario {
        let b = BuyerId(1);
        let seller = |id: u32, q: f64, c: f64| SellerProfile {
            id: SellerId(id),
            attendance_prob: attendance,
            workload: TruncatedGaussianSpec::default(),
            q_plus: [(b, q)].into_iter().collect(),
            base_cost: [(b, c)].into_iter().collect(),
            capacity: 1,
        };
        Scenario {
            sellers: vec![seller(1, 4.2, 1.2), seller(2, 4.0, 1.0)],
            buyers: vec![BuyerProfile {
                id: b,
                required_quality: 7.5,
                budget: 9.0,
                arrival_rank: 1,
                attendance_prob: 1.0,
            }],
            econ: EconomicParams {
                xi: 0.4,
                kappa: 0.2,
                forward_margin: 0.25,
                spot_margin: 0.5,
                default_penalty: 0.0,
            },
            risk_bounds: RiskBounds::uniform(0.35),
            limits: StructuralLimits {
                max_contracts_per_seller: 3,
                max_buyer_overbooking: 1.0,
            },
        }
    }

    pub fn small_options() -> ProblemOptions {
        ProblemOptions {
            samples: 1000,
            certify_samples: 4000,
            seed: 17,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn margin_makes_profit_constraint_hold() {
        let sc = instance_a(1.0);
        let p = build_problem_with(&sc, small_options()).unwrap();
        assert!(p.profit_constraint_holds());
        assert!(p.expected_profits().iter().all(|&x| x > 0.0));
        let mut zero = sc.clone();
        zero.econ.forward_margin = 0.0;
        let p = build_problem_with(&zero, small_options()).unwrap();
        assert!(p.expected_profits().iter().all(|&x| x.abs() < 1e-12));
        assert!(p.profit_constraint_holds());
    }

    #[test]
    fn alphabet_for_single_buyer() {
        let p = build_problem_with(&instance_a(1.0), small_options()).unwrap();
        for (si, choices) in p.alphabet.iter().enumerate() {
            assert_eq!(choices.len(), 3);
            assert!(choices[0].is_empty());
            let levels: Vec<Level> = choices[1..].iter().map(|c| p.candidates[c[0]].level).collect();
            assert_eq!(levels, vec![Level::Plus, Level::Minus]);
            assert!(choices[1..].iter().all(|c| p.candidates[c[0]].seller == si));
        }
    }

    #[test]
    fn alphabet_respects_cap_and_levels() {
        let by_buyer = vec![vec![0, 1], vec![2, 3], vec![4, 5]];
        let all = enumerate_choices(&by_buyer, 2);
        assert_eq!(all.len(), alphabet_size(3, 2, 2));
        assert_eq!(all.len(), 1 + 6 + 12);
        for c in &all {
            assert!(c.len() <= 2);
            let buyers: Vec<usize> = c.iter().map(|x| x / 2).collect();
            let mut dedup = buyers.clone();
            dedup.dedup();
            assert_eq!(buyers, dedup);
        }
    }
}
