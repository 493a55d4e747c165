//! Forward-contract fulfillment and the three chance-constraint families:
//! buyer quality shortfall, buyer over-budget, and seller loss.
//!
//! Two backends share one fulfillment kernel ([`serve_seller`]):
//! Monte Carlo over a common-random-number sample path, and exact
//! enumeration of attendance patterns with workloads integrated on an
//! equal-probability quantile grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{
    realized_quality, sample_realization, service_cost, BuyerId, ContractSet, Level, Realization,
    RiskBounds, Scenario, SellerId,
};
use crate::rng::{stream, Purpose};

/// Largest number of contracted sellers the exact backend will enumerate.
pub const EXACT_MAX_SELLERS: usize = 15;
/// Largest number of buyers with fractional attendance the exact backend will enumerate.
pub const EXACT_MAX_RANDOM_BUYERS: usize = 8;
/// Cap on workload-grid combinations examined for a single buyer pattern.
const EXACT_MAX_GRID_LEAVES: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnservedReason {
    SellerAbsent,
    BuyerAbsent,
    CapacityExceeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServedService {
    pub buyer_id: BuyerId,
    pub level: Level,
    pub quality: f64,
    pub price: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnservedContract {
    pub seller_id: SellerId,
    pub buyer_id: BuyerId,
    pub reason: UnservedReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FulfillmentOutcome {
    pub served: BTreeMap<SellerId, Vec<ServedService>>,
    pub unserved_contracts: Vec<UnservedContract>,
    pub buyer_quality: BTreeMap<BuyerId, f64>,
    pub buyer_payment: BTreeMap<BuyerId, f64>,
    /// Penalty fees owed by each seller for contracts it could not honor.
    pub seller_penalty: BTreeMap<SellerId, f64>,
}

impl FulfillmentOutcome {
    /// Sellers that delivered at least one forward service.
    pub fn busy_sellers(&self) -> impl Iterator<Item = SellerId> + '_ {
        self.served
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(s, _)| *s)
    }

    /// Contracts bumped by capacity whose buyer was present: volunteer candidates.
    pub fn capacity_exceeded(&self) -> impl Iterator<Item = &UnservedContract> {
        self.unserved_contracts
            .iter()
            .filter(|u| u.reason == UnservedReason::CapacityExceeded)
    }
}

/// A contract resolved against scenario positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct CompiledContract {
    pub buyer: usize,
    pub level: Level,
    pub price: f64,
    pub penalty: f64,
    pub q_plus: f64,
    pub base_cost: f64,
    pub rank: (u32, BuyerId),
}

/// Per-seller contract lists, each sorted by buyer arrival rank.
#[derive(Debug, Clone)]
pub(crate) struct CompiledContracts {
    pub per_seller: Vec<Vec<CompiledContract>>,
}

pub(crate) fn compile_contract(
    scenario: &Scenario,
    seller: usize,
    buyer: usize,
    level: Level,
    price: f64,
    penalty: f64,
) -> CompiledContract {
    let s = &scenario.sellers[seller];
    let b = &scenario.buyers[buyer];
    CompiledContract {
        buyer,
        level,
        price,
        penalty,
        q_plus: s.q_plus[&b.id],
        base_cost: s.base_cost[&b.id],
        rank: (b.arrival_rank, b.id),
    }
}

pub(crate) fn sort_by_rank(list: &mut [CompiledContract]) {
    list.sort_by(|a, b| a.rank.cmp(&b.rank).then(a.level.cmp(&b.level)));
}

impl CompiledContracts {
    pub fn compile(scenario: &Scenario, contracts: &ContractSet) -> Result<Self> {
        contracts.validate(scenario)?;
        let idx = scenario.index();
        let mut per_seller = vec![Vec::new(); scenario.sellers.len()];
        for c in &contracts.contracts {
            let si = idx.sellers[&c.seller_id];
            let bi = idx.buyers[&c.buyer_id];
            per_seller[si].push(compile_contract(scenario, si, bi, c.level, c.price, c.penalty));
        }
        for list in &mut per_seller {
            sort_by_rank(list);
        }
        Ok(CompiledContracts { per_seller })
    }

    pub fn contracted_sellers(&self) -> Vec<usize> {
        (0..self.per_seller.len())
            .filter(|&i| !self.per_seller[i].is_empty())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Disposition {
    Served,
    Unserved(UnservedReason),
}

/// FCFS forward fulfillment for one seller: present contracted buyers are
/// served in arrival order until capacity runs out. `contracts` must already
/// be rank-sorted.
#[inline]
pub(crate) fn serve_seller(
    capacity: u32,
    seller_present: bool,
    contracts: &[CompiledContract],
    buyer_present: &[bool],
    mut visit: impl FnMut(&CompiledContract, Disposition),
) {
    let mut used = 0u32;
    for c in contracts {
        let d = if !seller_present {
            Disposition::Unserved(UnservedReason::SellerAbsent)
        } else if !buyer_present[c.buyer] {
            Disposition::Unserved(UnservedReason::BuyerAbsent)
        } else if used < capacity {
            used += 1;
            Disposition::Served
        } else {
            Disposition::Unserved(UnservedReason::CapacityExceeded)
        };
        visit(c, d);
    }
}

/// Per-seller totals for one realization.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SellerTally {
    pub served: u32,
    pub income: f64,
    pub cost: f64,
    pub penalty: f64,
}

impl SellerTally {
    pub fn is_loss(&self) -> bool {
        self.served > 0 && self.income - self.cost - self.penalty < 0.0
    }
}

/// Runs the kernel for one seller, adding quality and payment into the
/// per-buyer accumulators and returning the seller's own tally.
#[inline]
pub(crate) fn accumulate_seller(
    scenario: &Scenario,
    seller: usize,
    contracts: &[CompiledContract],
    realization: &Realization,
    buyer_quality: &mut [f64],
    buyer_payment: &mut [f64],
) -> SellerTally {
    let s = &scenario.sellers[seller];
    let xi = scenario.econ.xi;
    let kappa = scenario.econ.kappa;
    let workload = realization.workloads[seller];
    let mut tally = SellerTally::default();
    serve_seller(
        s.capacity,
        realization.seller_present[seller],
        contracts,
        &realization.buyer_present,
        |c, d| match d {
            Disposition::Served => {
                tally.served += 1;
                tally.income += c.price;
                tally.cost += service_cost(c.level, c.base_cost, kappa, workload);
                buyer_quality[c.buyer] += realized_quality(c.level, c.q_plus, xi, workload);
                buyer_payment[c.buyer] += c.price;
            }
            Disposition::Unserved(UnservedReason::CapacityExceeded) => tally.penalty += c.penalty,
            Disposition::Unserved(_) => {}
        },
    );
    tally
}

pub fn simulate_fulfillment(
    scenario: &Scenario,
    contracts: &ContractSet,
    realization: &Realization,
) -> Result<FulfillmentOutcome> {
    check_realization(scenario, realization)?;
    let compiled = CompiledContracts::compile(scenario, contracts)?;
    Ok(fulfill_compiled(scenario, &compiled, realization))
}

pub(crate) fn check_realization(scenario: &Scenario, r: &Realization) -> Result<()> {
    if r.seller_present.len() != scenario.sellers.len()
        || r.workloads.len() != scenario.sellers.len()
        || r.buyer_present.len() != scenario.buyers.len()
    {
        return Err(Error::Structural(format!(
            "realization {} does not cover the scenario's {} sellers and {} buyers",
            r.transaction_index,
            scenario.sellers.len(),
            scenario.buyers.len()
        )));
    }
    Ok(())
}

pub(crate) fn fulfill_compiled(
    scenario: &Scenario,
    compiled: &CompiledContracts,
    realization: &Realization,
) -> FulfillmentOutcome {
    let xi = scenario.econ.xi;
    let kappa = scenario.econ.kappa;
    let mut out = FulfillmentOutcome::default();
    let mut quality = vec![0.0; scenario.buyers.len()];
    let mut payment = vec![0.0; scenario.buyers.len()];
    for (si, s) in scenario.sellers.iter().enumerate() {
        let list = &compiled.per_seller[si];
        if list.is_empty() {
            continue;
        }
        let workload = realization.workloads[si];
        let mut served = Vec::new();
        let mut penalty = 0.0;
        serve_seller(
            s.capacity,
            realization.seller_present[si],
            list,
            &realization.buyer_present,
            |c, d| {
                let buyer_id = scenario.buyers[c.buyer].id;
                match d {
                    Disposition::Served => {
                        let q = realized_quality(c.level, c.q_plus, xi, workload);
                        quality[c.buyer] += q;
                        payment[c.buyer] += c.price;
                        served.push(ServedService {
                            buyer_id,
                            level: c.level,
                            quality: q,
                            price: c.price,
                            cost: service_cost(c.level, c.base_cost, kappa, workload),
                        });
                    }
                    Disposition::Unserved(reason) => {
                        if reason == UnservedReason::CapacityExceeded {
                            penalty += c.penalty;
                        }
                        out.unserved_contracts.push(UnservedContract {
                            seller_id: s.id,
                            buyer_id,
                            reason,
                        });
                    }
                }
            },
        );
        out.served.insert(s.id, served);
        if penalty > 0.0 {
            out.seller_penalty.insert(s.id, penalty);
        }
    }
    for (bi, b) in scenario.buyers.iter().enumerate() {
        out.buyer_quality.insert(b.id, quality[bi]);
        out.buyer_payment.insert(b.id, payment[bi]);
    }
    out
}

/// How a [`RiskReport`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Backend {
    MonteCarlo { samples: u64, seed: u64 },
    Exact { grid_points: usize },
    /// A fixed, fully realized sample path (spot-time problems).
    Realized { samples: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub shortfall: BTreeMap<BuyerId, f64>,
    pub over_budget: BTreeMap<BuyerId, f64>,
    pub seller_loss: BTreeMap<SellerId, f64>,
    pub backend: Backend,
}

impl RiskReport {
    /// Largest amount by which any probability exceeds its bound (0 if none).
    pub fn max_violation(&self, bounds: &RiskBounds) -> f64 {
        let over = |m: f64, eps: f64| (m - eps).max(0.0);
        let a = self.shortfall.values().fold(0.0f64, |m, &p| m.max(over(p, bounds.eps_shortfall)));
        let b = self.over_budget.values().fold(0.0f64, |m, &p| m.max(over(p, bounds.eps_budget)));
        let c = self.seller_loss.values().fold(0.0f64, |m, &p| m.max(over(p, bounds.eps_seller_loss)));
        a.max(b).max(c)
    }

    pub fn within(&self, bounds: &RiskBounds, tolerance: f64) -> bool {
        self.max_violation(bounds) <= tolerance
    }

    pub fn probabilities(&self) -> impl Iterator<Item = f64> + '_ {
        self.shortfall
            .values()
            .chain(self.over_budget.values())
            .chain(self.seller_loss.values())
            .copied()
    }

    /// Pretty JSON with fixed field names.
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("risk report serializes")
    }
}

/// A set of realizations on which candidates are compared.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub realizations: Vec<Realization>,
    pub backend: Backend,
}

impl SamplePath {
    /// `samples` draws, each from its own stream derived from `(seed, purpose, i)`.
    /// The path depends only on the scenario and seed, never on contracts.
    pub fn monte_carlo(scenario: &Scenario, samples: u64, seed: u64, purpose: Purpose) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Parameter("samples must be >= 1".into()));
        }
        let realizations = (0..samples)
            .map(|i| sample_realization(scenario, &mut stream(seed, purpose, i), i))
            .collect();
        Ok(SamplePath {
            realizations,
            backend: Backend::MonteCarlo { samples, seed },
        })
    }

    pub fn realized(realizations: Vec<Realization>) -> Self {
        let samples = realizations.len() as u64;
        SamplePath {
            realizations,
            backend: Backend::Realized { samples },
        }
    }

    pub fn len(&self) -> usize {
        self.realizations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.realizations.is_empty()
    }
}

/// Integer event counts plus quality sums over a sample path.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PathStats {
    pub samples: u64,
    pub shortfall: Vec<u64>,
    pub over_budget: Vec<u64>,
    pub seller_loss: Vec<u64>,
    pub quality_sum: Vec<f64>,
}

pub(crate) fn evaluate_path(scenario: &Scenario, compiled: &CompiledContracts, path: &SamplePath) -> PathStats {
    let nb = scenario.buyers.len();
    let ns = scenario.sellers.len();
    let mut stats = PathStats {
        samples: path.len() as u64,
        shortfall: vec![0; nb],
        over_budget: vec![0; nb],
        seller_loss: vec![0; ns],
        quality_sum: vec![0.0; nb],
    };
    let mut quality = vec![0.0; nb];
    let mut payment = vec![0.0; nb];
    for r in &path.realizations {
        quality.iter_mut().for_each(|q| *q = 0.0);
        payment.iter_mut().for_each(|p| *p = 0.0);
        for si in 0..ns {
            let list = &compiled.per_seller[si];
            if list.is_empty() {
                continue;
            }
            let tally = accumulate_seller(scenario, si, list, r, &mut quality, &mut payment);
            if tally.is_loss() {
                stats.seller_loss[si] += 1;
            }
        }
        for (bi, b) in scenario.buyers.iter().enumerate() {
            if !r.buyer_present[bi] {
                continue;
            }
            if quality[bi] < b.required_quality {
                stats.shortfall[bi] += 1;
            }
            if payment[bi] > b.budget {
                stats.over_budget[bi] += 1;
            }
            stats.quality_sum[bi] += quality[bi];
        }
    }
    stats
}

impl PathStats {
    pub fn report(&self, scenario: &Scenario, backend: Backend) -> RiskReport {
        let s = self.samples.max(1) as f64;
        RiskReport {
            shortfall: scenario.buyers.iter().zip(&self.shortfall).map(|(b, &c)| (b.id, c as f64 / s)).collect(),
            over_budget: scenario.buyers.iter().zip(&self.over_budget).map(|(b, &c)| (b.id, c as f64 / s)).collect(),
            seller_loss: scenario.sellers.iter().zip(&self.seller_loss).map(|(x, &c)| (x.id, c as f64 / s)).collect(),
            backend,
        }
    }

    pub fn expected_quality(&self, scenario: &Scenario) -> BTreeMap<BuyerId, f64> {
        let s = self.samples.max(1) as f64;
        scenario.buyers.iter().zip(&self.quality_sum).map(|(b, &q)| (b.id, q / s)).collect()
    }
}

/// Risks of `contracts` on an existing sample path.
pub fn risks_on_path(scenario: &Scenario, contracts: &ContractSet, path: &SamplePath) -> Result<RiskReport> {
    let compiled = CompiledContracts::compile(scenario, contracts)?;
    Ok(evaluate_path(scenario, &compiled, path).report(scenario, path.backend))
}

pub fn estimate_risks_mc(scenario: &Scenario, contracts: &ContractSet, samples: u64, seed: u64) -> Result<RiskReport> {
    let path = SamplePath::monte_carlo(scenario, samples, seed, Purpose::RiskSample)?;
    risks_on_path(scenario, contracts, &path)
}

/// Attendance patterns and grids for the exact backend.
struct ExactModel<'a> {
    scenario: &'a Scenario,
    compiled: CompiledContracts,
    contracted: Vec<usize>,
    random_buyers: Vec<usize>,
    grids: Vec<Vec<f64>>,
}

struct PatternVisit<'a> {
    weight: f64,
    realization: &'a Realization,
}

impl<'a> ExactModel<'a> {
    fn new(scenario: &'a Scenario, contracts: &ContractSet, grid_points: usize) -> Result<Self> {
        if grid_points < 2 {
            return Err(Error::Parameter("grid_points must be >= 2".into()));
        }
        let compiled = CompiledContracts::compile(scenario, contracts)?;
        let contracted = compiled.contracted_sellers();
        if contracted.len() > EXACT_MAX_SELLERS {
            return Err(Error::Capacity(format!(
                "exact backend enumerates at most {EXACT_MAX_SELLERS} contracted sellers, instance has {}",
                contracted.len()
            )));
        }
        let random_buyers: Vec<usize> = (0..scenario.buyers.len())
            .filter(|&i| {
                let p = scenario.buyers[i].attendance_prob;
                p > 0.0 && p < 1.0
            })
            .collect();
        if random_buyers.len() > EXACT_MAX_RANDOM_BUYERS {
            return Err(Error::Capacity(format!(
                "exact backend enumerates at most {EXACT_MAX_RANDOM_BUYERS} buyers with random attendance, instance has {}",
                random_buyers.len()
            )));
        }
        let grids = scenario.sellers.iter().map(|s| s.workload.quantile_grid(grid_points)).collect();
        Ok(ExactModel {
            scenario,
            compiled,
            contracted,
            random_buyers,
            grids,
        })
    }

    /// Calls `f` once per attendance pattern with non-zero probability.
    /// Workloads in the yielded realization are placeholders.
    fn for_each_pattern(&self, mut f: impl FnMut(PatternVisit<'_>)) {
        let sc = self.scenario;
        let mut r = Realization {
            transaction_index: 0,
            seller_present: vec![false; sc.sellers.len()],
            buyer_present: sc.buyers.iter().map(|b| b.attendance_prob >= 1.0).collect(),
            workloads: sc.sellers.iter().map(|s| s.workload.expected_value()).collect(),
        };
        let ks = self.contracted.len();
        let kb = self.random_buyers.len();
        for smask in 0u64..(1u64 << ks) {
            let mut ws = 1.0;
            for (j, &si) in self.contracted.iter().enumerate() {
                let present = smask >> j & 1 == 1;
                let a = sc.sellers[si].attendance_prob;
                ws *= if present { a } else { 1.0 - a };
                r.seller_present[si] = present;
            }
            if ws == 0.0 {
                continue;
            }
            for bmask in 0u64..(1u64 << kb) {
                let mut w = ws;
                for (j, &bi) in self.random_buyers.iter().enumerate() {
                    let present = bmask >> j & 1 == 1;
                    let p = sc.buyers[bi].attendance_prob;
                    w *= if present { p } else { 1.0 - p };
                    r.buyer_present[bi] = present;
                }
                if w == 0.0 {
                    continue;
                }
                f(PatternVisit {
                    weight: w,
                    realization: &r,
                });
            }
        }
    }
}

/// Per-buyer structure of one attendance pattern: deterministic quality and
/// payment plus the minus-level services whose quality depends on workload.
struct BuyerPattern {
    fixed_quality: Vec<f64>,
    payment: Vec<f64>,
    minus_terms: Vec<Vec<(f64, usize)>>,
}

fn pattern_structure(model: &ExactModel<'_>, r: &Realization, mut on_seller: impl FnMut(usize, &[(CompiledContract, Disposition)])) -> BuyerPattern {
    let sc = model.scenario;
    let nb = sc.buyers.len();
    let mut bp = BuyerPattern {
        fixed_quality: vec![0.0; nb],
        payment: vec![0.0; nb],
        minus_terms: vec![Vec::new(); nb],
    };
    let mut events = Vec::new();
    for &si in &model.contracted {
        events.clear();
        serve_seller(
            sc.sellers[si].capacity,
            r.seller_present[si],
            &model.compiled.per_seller[si],
            &r.buyer_present,
            |c, d| events.push((*c, d)),
        );
        for (c, d) in &events {
            if *d == Disposition::Served {
                bp.payment[c.buyer] += c.price;
                match c.level {
                    Level::Plus => bp.fixed_quality[c.buyer] += c.q_plus,
                    Level::Minus => bp.minus_terms[c.buyer].push((c.q_plus, si)),
                }
            }
        }
        on_seller(si, &events);
    }
    bp
}

/// P(Σ_j max(0, q_j − ξ·l_j) < target) with each l_j uniform over its grid.
fn prob_sum_below(target: f64, terms: &[(f64, usize)], grids: &[Vec<f64>], xi: f64, leaves: &mut u64) -> f64 {
    // value ranges of the remaining terms on their grids
    let range = |&(q, si): &(f64, usize)| {
        let g = &grids[si];
        let lo = realized_quality(Level::Minus, q, xi, g[g.len() - 1]);
        let hi = realized_quality(Level::Minus, q, xi, g[0]);
        (lo, hi)
    };
    let (min_sum, max_sum) = terms.iter().map(range).fold((0.0, 0.0), |(a, b), (lo, hi)| (a + lo, b + hi));
    if max_sum < target {
        return 1.0;
    }
    if min_sum >= target {
        return 0.0;
    }
    let Some((&(q, si), rest)) = terms.split_first() else {
        return if 0.0 < target { 1.0 } else { 0.0 };
    };
    let g = &grids[si];
    *leaves += g.len() as u64;
    g.iter()
        .map(|&l| prob_sum_below(target - realized_quality(Level::Minus, q, xi, l), rest, grids, xi, leaves))
        .sum::<f64>()
        / g.len() as f64
}

pub fn compute_risks_exact(scenario: &Scenario, contracts: &ContractSet, grid_points: usize) -> Result<RiskReport> {
    let model = ExactModel::new(scenario, contracts, grid_points)?;
    let sc = scenario;
    let xi = sc.econ.xi;
    let kappa = sc.econ.kappa;
    let nb = sc.buyers.len();
    let mut shortfall = vec![0.0; nb];
    let mut over_budget = vec![0.0; nb];
    let mut seller_loss = vec![0.0; sc.sellers.len()];
    let mut leaves = 0u64;
    model.for_each_pattern(|visit| {
        let w = visit.weight;
        let r = visit.realization;
        let bp = pattern_structure(&model, r, |si, events| {
            let (mut served, mut income, mut base, mut plus, mut penalty) = (0u32, 0.0, 0.0, 0u32, 0.0);
            for (c, d) in events {
                match d {
                    Disposition::Served => {
                        served += 1;
                        income += c.price;
                        base += c.base_cost;
                        if c.level == Level::Plus {
                            plus += 1;
                        }
                    }
                    Disposition::Unserved(UnservedReason::CapacityExceeded) => penalty += c.penalty,
                    Disposition::Unserved(_) => {}
                }
            }
            if served == 0 {
                return;
            }
            let grid = &model.grids[si];
            let losses = grid
                .iter()
                .filter(|&&l| income - (base + kappa * l * plus as f64) - penalty < 0.0)
                .count();
            seller_loss[si] += w * losses as f64 / grid.len() as f64;
        });
        for (bi, b) in sc.buyers.iter().enumerate() {
            if !r.buyer_present[bi] {
                continue;
            }
            if bp.payment[bi] > b.budget {
                over_budget[bi] += w;
            }
            let target = b.required_quality - bp.fixed_quality[bi];
            shortfall[bi] += w * prob_sum_below(target, &bp.minus_terms[bi], &model.grids, xi, &mut leaves);
        }
    });
    if leaves > EXACT_MAX_GRID_LEAVES {
        return Err(Error::Capacity(format!(
            "exact backend visited {leaves} workload grid nodes (limit {EXACT_MAX_GRID_LEAVES}); reduce grid_points"
        )));
    }
    let clamp = |p: f64| p.clamp(0.0, 1.0);
    Ok(RiskReport {
        shortfall: sc.buyers.iter().zip(&shortfall).map(|(b, &p)| (b.id, clamp(p))).collect(),
        over_budget: sc.buyers.iter().zip(&over_budget).map(|(b, &p)| (b.id, clamp(p))).collect(),
        seller_loss: sc.sellers.iter().zip(&seller_loss).map(|(s, &p)| (s.id, clamp(p))).collect(),
        backend: Backend::Exact { grid_points },
    })
}

/// E[buyer quality] under forward fulfillment, via the chosen backend.
/// `Backend::Realized` is not accepted here; use [`expected_quality_on_path`].
pub fn expected_buyer_quality(scenario: &Scenario, contracts: &ContractSet, backend: &Backend) -> Result<BTreeMap<BuyerId, f64>> {
    match *backend {
        Backend::MonteCarlo { samples, seed } => {
            let path = SamplePath::monte_carlo(scenario, samples, seed, Purpose::RiskSample)?;
            expected_quality_on_path(scenario, contracts, &path)
        }
        Backend::Exact { grid_points } => {
            let model = ExactModel::new(scenario, contracts, grid_points)?;
            let xi = scenario.econ.xi;
            let mut q = vec![0.0; scenario.buyers.len()];
            model.for_each_pattern(|visit| {
                let bp = pattern_structure(&model, visit.realization, |_, _| {});
                for (bi, qb) in q.iter_mut().enumerate() {
                    let minus: f64 = bp.minus_terms[bi]
                        .iter()
                        .map(|&(qp, si)| {
                            let g = &model.grids[si];
                            g.iter().map(|&l| realized_quality(Level::Minus, qp, xi, l)).sum::<f64>() / g.len() as f64
                        })
                        .sum();
                    *qb += visit.weight * (bp.fixed_quality[bi] + minus);
                }
            });
            Ok(scenario.buyers.iter().zip(q).map(|(b, v)| (b.id, v)).collect())
        }
        Backend::Realized { .. } => Err(Error::Parameter(
            "a realized backend needs its sample path; use expected_quality_on_path".into(),
        )),
    }
}

pub fn expected_quality_on_path(scenario: &Scenario, contracts: &ContractSet, path: &SamplePath) -> Result<BTreeMap<BuyerId, f64>> {
    let compiled = CompiledContracts::compile(scenario, contracts)?;
    Ok(evaluate_path(scenario, &compiled, path).expected_quality(scenario))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{BuyerProfile, EconomicParams, ForwardContract, RiskBounds, SellerProfile, StructuralLimits, TruncatedGaussianSpec};
    use approx::assert_abs_diff_eq;

    fn buyer(id: u32, rank: u32, req: f64, budget: f64) -> BuyerProfile {
        BuyerProfile {
            id: BuyerId(id),
            required_quality: req,
            budget,
            arrival_rank: rank,
            attendance_prob: 1.0,
        }
    }

    fn seller(id: u32, a: f64, terms: &[(u32, f64, f64)]) -> SellerProfile {
        SellerProfile {
            id: SellerId(id),
            attendance_prob: a,
            workload: TruncatedGaussianSpec::default(),
            q_plus: terms.iter().map(|&(b, q, _)| (BuyerId(b), q)).collect(),
            base_cost: terms.iter().map(|&(b, _, c)| (BuyerId(b), c)).collect(),
            capacity: 1,
        }
    }

    fn scenario(sellers: Vec<SellerProfile>, buyers: Vec<BuyerProfile>) -> Scenario {
        Scenario {
            sellers,
            buyers,
            econ: EconomicParams::default(),
            risk_bounds: RiskBounds::default(),
            limits: StructuralLimits::default(),
        }
    }

    fn contract(s: u32, b: u32, level: Level, price: f64) -> ForwardContract {
        ForwardContract {
            seller_id: SellerId(s),
            buyer_id: BuyerId(b),
            level,
            price,
            penalty: 0.0,
        }
    }

    fn all_present(sc: &Scenario) -> Realization {
        Realization {
            transaction_index: 0,
            seller_present: vec![true; sc.sellers.len()],
            buyer_present: vec![true; sc.buyers.len()],
            workloads: vec![2.5; sc.sellers.len()],
        }
    }

    #[test]
    fn fcfs_serves_earlier_rank_first() {
        let sc = scenario(
            vec![seller(1, 1.0, &[(1, 4.0, 1.0), (2, 4.0, 1.0)])],
            vec![buyer(1, 2, 7.5, 9.0), buyer(2, 1, 7.5, 9.0)],
        );
        // b2 arrives first (rank 1)
        let cs = ContractSet::new(vec![contract(1, 1, Level::Plus, 2.0), contract(1, 2, Level::Plus, 2.0)]);
        let out = simulate_fulfillment(&sc, &cs, &all_present(&sc)).unwrap();
        assert_eq!(out.served[&SellerId(1)].len(), 1);
        assert_eq!(out.served[&SellerId(1)][0].buyer_id, BuyerId(2));
        assert_eq!(
            out.unserved_contracts,
            vec![UnservedContract {
                seller_id: SellerId(1),
                buyer_id: BuyerId(1),
                reason: UnservedReason::CapacityExceeded
            }]
        );
        assert_eq!(out.buyer_quality[&BuyerId(1)], 0.0);
        assert_eq!(out.buyer_payment[&BuyerId(2)], 2.0);
    }

    #[test]
    fn absent_seller_and_empty_contracts() {
        let sc = scenario(vec![seller(1, 1.0, &[(1, 4.0, 1.0)])], vec![buyer(1, 1, 7.5, 9.0)]);
        let mut r = all_present(&sc);
        r.seller_present[0] = false;
        let cs = ContractSet::new(vec![contract(1, 1, Level::Plus, 2.0)]);
        let out = simulate_fulfillment(&sc, &cs, &r).unwrap();
        assert_eq!(out.unserved_contracts[0].reason, UnservedReason::SellerAbsent);
        assert_eq!(out.buyer_payment[&BuyerId(1)], 0.0);

        let out = simulate_fulfillment(&sc, &ContractSet::default(), &all_present(&sc)).unwrap();
        assert!(out.served.is_empty());
        assert_eq!(out.buyer_quality[&BuyerId(1)], 0.0);
    }

    #[test]
    fn dangling_reference_is_structural() {
        let sc = scenario(vec![seller(1, 1.0, &[(1, 4.0, 1.0)])], vec![buyer(1, 1, 7.5, 9.0)]);
        let cs = ContractSet::new(vec![contract(9, 1, Level::Plus, 2.0)]);
        assert!(matches!(simulate_fulfillment(&sc, &cs, &all_present(&sc)), Err(Error::Structural(_))));
    }

    /// Oracle: enumerate the four attendance outcomes of two sellers by hand.
    fn two_seller_shortfall_oracle() -> f64 {
        let mut p = 0.0;
        for (x1, x2) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let q = 4.0 * (x1 + x2) as f64;
            if q < 7.5 {
                p += 0.25;
            }
        }
        p
    }

    fn shortfall_instance() -> (Scenario, ContractSet) {
        let sc = scenario(
            vec![seller(1, 0.5, &[(1, 4.0, 1.2)]), seller(2, 0.5, &[(1, 4.0, 1.2)])],
            vec![buyer(1, 1, 7.5, 9.0)],
        );
        let cs = ContractSet::new(vec![contract(1, 1, Level::Plus, 2.125), contract(2, 1, Level::Plus, 2.125)]);
        (sc, cs)
    }

    #[test]
    fn shortfall_mc_and_exact() {
        let oracle = two_seller_shortfall_oracle();
        assert_eq!(oracle, 0.75);
        let (sc, cs) = shortfall_instance();
        let mc = estimate_risks_mc(&sc, &cs, 10_000, 5).unwrap();
        assert_abs_diff_eq!(mc.shortfall[&BuyerId(1)], oracle, epsilon = 0.02);
        let ex = compute_risks_exact(&sc, &cs, 16).unwrap();
        assert_abs_diff_eq!(ex.shortfall[&BuyerId(1)], oracle, epsilon = 1e-12);
    }

    #[test]
    fn over_budget_binomial() {
        // only the all-present outcome pays 9 > 8: 0.5^5
        let oracle: f64 = (0..32u32)
            .filter(|m| 1.8 * m.count_ones() as f64 > 8.0)
            .map(|_| 1.0 / 32.0)
            .sum();
        assert_eq!(oracle, 0.03125);
        let sellers = (1..=5).map(|i| seller(i, 0.5, &[(1, 4.0, 1.0)])).collect();
        let sc = scenario(sellers, vec![buyer(1, 1, 7.5, 8.0)]);
        let cs = ContractSet::new((1..=5).map(|i| contract(i, 1, Level::Plus, 1.8)).collect());
        let ex = compute_risks_exact(&sc, &cs, 4).unwrap();
        assert_abs_diff_eq!(ex.over_budget[&BuyerId(1)], oracle, epsilon = 1e-12);
        let mc = estimate_risks_mc(&sc, &cs, 20_000, 9).unwrap();
        assert_abs_diff_eq!(mc.over_budget[&BuyerId(1)], oracle, epsilon = 0.006);
    }

    #[test]
    fn plus_price_cannot_lose_within_truncation() {
        // loss needs 0.2·l > 0.25·1.2 + 1.25·0.2·2.5, i.e. l > 4.625 > hi = 3.5
        let threshold = (0.25 * 1.2 + 1.25 * 0.2 * 2.5) / 0.2;
        assert_abs_diff_eq!(threshold, 4.625, epsilon = 1e-12);
        let sc = scenario(vec![seller(1, 0.9, &[(1, 4.0, 1.2)])], vec![buyer(1, 1, 7.5, 9.0)]);
        let cs = ContractSet::new(vec![contract(1, 1, Level::Plus, 2.125)]);
        let mc = estimate_risks_mc(&sc, &cs, 5_000, 1).unwrap();
        assert_eq!(mc.seller_loss[&SellerId(1)], 0.0);
        let ex = compute_risks_exact(&sc, &cs, 32).unwrap();
        assert_eq!(ex.seller_loss[&SellerId(1)], 0.0);
    }

    #[test]
    fn exact_sure_and_impossible_events() {
        let sc = scenario(
            vec![seller(1, 1.0, &[(1, 4.0, 1.0)]), seller(2, 1.0, &[(1, 4.0, 1.0)])],
            vec![buyer(1, 1, 7.5, 9.0)],
        );
        let cs = ContractSet::new(vec![contract(1, 1, Level::Plus, 2.0), contract(2, 1, Level::Plus, 2.0)]);
        assert_eq!(compute_risks_exact(&sc, &cs, 8).unwrap().shortfall[&BuyerId(1)], 0.0);

        let sc = scenario(vec![seller(1, 0.7, &[(1, 4.0, 1.0)])], vec![buyer(1, 1, 7.5, 9.0)]);
        let cs = ContractSet::new(vec![contract(1, 1, Level::Plus, 2.0)]);
        assert_eq!(compute_risks_exact(&sc, &cs, 8).unwrap().shortfall[&BuyerId(1)], 1.0);
    }

    #[test]
    fn exact_guard_and_parameters() {
        let sellers: Vec<_> = (1..=16).map(|i| seller(i, 0.5, &[(1, 4.0, 1.0)])).collect();
        let sc = scenario(sellers, vec![buyer(1, 1, 7.5, 9.0)]);
        let cs = ContractSet::new((1..=16).map(|i| contract(i, 1, Level::Plus, 1.0)).collect());
        match compute_risks_exact(&sc, &cs, 4) {
            Err(Error::Capacity(msg)) => assert!(msg.contains("15")),
            other => panic!("{other:?}"),
        }
        let (sc, cs) = shortfall_instance();
        assert!(matches!(compute_risks_exact(&sc, &cs, 1), Err(Error::Parameter(_))));
        assert!(matches!(estimate_risks_mc(&sc, &cs, 0, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn expected_quality_examples() {
        let sc = scenario(vec![seller(1, 0.5, &[(1, 4.0, 1.0)])], vec![buyer(1, 1, 7.5, 9.0)]);
        let cs = ContractSet::new(vec![contract(1, 1, Level::Plus, 2.0)]);
        let q = expected_buyer_quality(&sc, &cs, &Backend::Exact { grid_points: 8 }).unwrap();
        assert_abs_diff_eq!(q[&BuyerId(1)], 2.0, epsilon = 1e-12);

        let (sc2, cs2) = shortfall_instance();
        // linearity oracle: Σ a·q when capacity never binds
        let oracle: f64 = sc2.sellers.iter().map(|s| s.attendance_prob * 4.0).sum();
        let q = expected_buyer_quality(&sc2, &cs2, &Backend::Exact { grid_points: 8 }).unwrap();
        assert_abs_diff_eq!(q[&BuyerId(1)], oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle, 4.0, epsilon = 1e-12);

        let mut sc0 = sc.clone();
        sc0.sellers[0].attendance_prob = 0.0;
        let q = expected_buyer_quality(&sc0, &cs, &Backend::MonteCarlo { samples: 100, seed: 1 }).unwrap();
        assert_eq!(q[&BuyerId(1)], 0.0);
    }

    #[test]
    fn minus_level_exact_matches_mc() {
        let sc = scenario(
            vec![
                seller(1, 0.8, &[(1, 4.5, 1.2)]),
                seller(2, 0.9, &[(1, 4.2, 1.1)]),
                seller(3, 0.6, &[(1, 4.8, 1.0)]),
            ],
            vec![buyer(1, 1, 8.0, 5.0)],
        );
        let cs = ContractSet::new(vec![
            contract(1, 1, Level::Minus, 1.5),
            contract(2, 1, Level::Minus, 1.4),
            contract(3, 1, Level::Plus, 2.0),
        ]);
        let ex = compute_risks_exact(&sc, &cs, 48).unwrap();
        let mc = estimate_risks_mc(&sc, &cs, 40_000, 2).unwrap();
        for (a, b) in ex.probabilities().zip(mc.probabilities()) {
            assert_abs_diff_eq!(a, b, epsilon = 0.015);
        }
    }
}
