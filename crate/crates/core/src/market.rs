//! Market model: participants, stochastic kernels, and the pricing, cost,
//! quality and utility formulas every other module builds on.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SellerId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BuyerId(pub u32);

impl fmt::Display for SellerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl fmt::Display for BuyerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

fn parse_prefixed(s: &str, prefix: char, what: &str) -> Result<u32> {
    s.strip_prefix(prefix)
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Parameter(format!("invalid {what} id {s:?}")))
}

impl std::str::FromStr for SellerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_prefixed(s, 's', "seller").map(SellerId)
    }
}

impl std::str::FromStr for BuyerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_prefixed(s, 'b', "buyer").map(BuyerId)
    }
}

/// Service level a seller commits to. `Plus` promises a fixed quality and
/// costs more to deliver; `Minus` lets local workload erode the quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Plus,
    Minus,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::Plus, Level::Minus];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Plus => "plus",
            Level::Minus => "minus",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Gaussian `N(mean, std_dev²)` restricted to `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussianSpec {
    pub mean: f64,
    pub std_dev: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for TruncatedGaussianSpec {
    fn default() -> Self {
        TruncatedGaussianSpec {
            mean: 2.5,
            std_dev: 0.5,
            lo: 1.5,
            hi: 3.5,
        }
    }
}

impl TruncatedGaussianSpec {
    pub fn new(mean: f64, std_dev: f64, lo: f64, hi: f64) -> Result<Self> {
        let spec = TruncatedGaussianSpec {
            mean,
            std_dev,
            lo,
            hi,
        };
        let mut offenses = Vec::new();
        spec.check(&mut offenses, "workload");
        if offenses.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Validation(offenses))
        }
    }

    pub(crate) fn check(&self, offenses: &mut Vec<String>, ctx: &str) {
        if !(self.std_dev > 0.0 && self.std_dev.is_finite()) {
            offenses.push(format!("{ctx}: std_dev must be > 0 (got {})", self.std_dev));
        }
        if !(self.lo < self.hi) {
            offenses.push(format!(
                "{ctx}: truncation requires lo < hi (got [{}, {}])",
                self.lo, self.hi
            ));
        }
        if !self.mean.is_finite() {
            offenses.push(format!("{ctx}: mean must be finite"));
        }
    }

    fn standardized(&self) -> (f64, f64) {
        (
            (self.lo - self.mean) / self.std_dev,
            (self.hi - self.mean) / self.std_dev,
        )
    }

    /// Inverse CDF of the truncated law at `u ∈ [0, 1]`. Works on the lower
    /// tail of whichever side keeps the normal CDF well conditioned.
    pub fn quantile(&self, u: f64) -> f64 {
        let n = std_normal();
        let (alpha, beta) = self.standardized();
        let u = u.clamp(0.0, 1.0);
        let z = if alpha > 0.0 {
            // mirror: X = -Y with Y truncated to [-beta, -alpha]
            let (pa, pb) = (n.cdf(-beta), n.cdf(-alpha));
            -n.inverse_cdf(pa + (1.0 - u) * (pb - pa))
        } else {
            let (pa, pb) = (n.cdf(alpha), n.cdf(beta));
            n.inverse_cdf(pa + u * (pb - pa))
        };
        let x = self.mean + self.std_dev * z;
        if x.is_finite() {
            x.clamp(self.lo, self.hi)
        } else {
            // probability mass vanished numerically; fall back to the interval
            self.lo + u * (self.hi - self.lo)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }

    pub fn expected_value(&self) -> f64 {
        let n = std_normal();
        let (alpha, beta) = self.standardized();
        let mass = n.cdf(beta) - n.cdf(alpha);
        if mass <= 1e-300 {
            return 0.5 * (self.lo + self.hi);
        }
        let shift = (n.pdf(alpha) - n.pdf(beta)) / mass;
        (self.mean + self.std_dev * shift).clamp(self.lo, self.hi)
    }

    pub fn variance(&self) -> f64 {
        let n = std_normal();
        let (alpha, beta) = self.standardized();
        let mass = n.cdf(beta) - n.cdf(alpha);
        if mass <= 1e-300 {
            return (self.hi - self.lo).powi(2) / 12.0;
        }
        let (pa, pb) = (n.pdf(alpha), n.pdf(beta));
        let ratio = (pa - pb) / mass;
        let tail = (alpha * pa - beta * pb) / mass;
        (self.std_dev * self.std_dev * (1.0 + tail - ratio * ratio)).max(0.0)
    }

    /// Equal-probability quantile nodes: midpoints of `points` probability cells.
    pub fn quantile_grid(&self, points: usize) -> Vec<f64> {
        (0..points)
            .map(|i| self.quantile((i as f64 + 0.5) / points as f64))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SellerProfile {
    pub id: SellerId,
    pub attendance_prob: f64,
    pub workload: TruncatedGaussianSpec,
    pub q_plus: BTreeMap<BuyerId, f64>,
    pub base_cost: BTreeMap<BuyerId, f64>,
    #[serde(default = "default_capacity")]
    pub capacity: u32,
}

fn default_capacity() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuyerProfile {
    pub id: BuyerId,
    pub required_quality: f64,
    pub budget: f64,
    pub arrival_rank: u32,
    #[serde(default = "default_buyer_attendance")]
    pub attendance_prob: f64,
}

fn default_buyer_attendance() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EconomicParams {
    pub xi: f64,
    pub kappa: f64,
    pub forward_margin: f64,
    pub spot_margin: f64,
    pub default_penalty: f64,
}

impl Default for EconomicParams {
    fn default() -> Self {
        EconomicParams {
            xi: 0.4,
            kappa: 0.2,
            forward_margin: 0.25,
            spot_margin: 0.5,
            default_penalty: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskBounds {
    pub eps_shortfall: f64,
    pub eps_budget: f64,
    pub eps_seller_loss: f64,
}

impl Default for RiskBounds {
    fn default() -> Self {
        RiskBounds::uniform(0.35)
    }
}

impl RiskBounds {
    pub fn uniform(eps: f64) -> Self {
        RiskBounds {
            eps_shortfall: eps,
            eps_budget: eps,
            eps_seller_loss: eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuralLimits {
    /// Most forward contracts one seller may sign.
    pub max_contracts_per_seller: u32,
    /// Cap on a buyer's overbooking rate.
    pub max_buyer_overbooking: f64,
}

impl Default for StructuralLimits {
    fn default() -> Self {
        StructuralLimits {
            max_contracts_per_seller: 3,
            max_buyer_overbooking: 1.0,
        }
    }
}

/// Full market description for one PoI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub sellers: Vec<SellerProfile>,
    pub buyers: Vec<BuyerProfile>,
    pub econ: EconomicParams,
    pub risk_bounds: RiskBounds,
    pub limits: StructuralLimits,
}

fn in_unit(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl Scenario {
    /// Collects every offense instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut off = Vec::new();
        if self.sellers.is_empty() {
            off.push("scenario has no sellers".to_string());
        }
        if self.buyers.is_empty() {
            off.push("scenario has no buyers".to_string());
        }
        let mut seen_buyers = BTreeMap::new();
        let mut ranks = BTreeMap::new();
        for b in &self.buyers {
            if seen_buyers.insert(b.id, ()).is_some() {
                off.push(format!("duplicate buyer id {}", b.id));
            }
            if let Some(other) = ranks.insert(b.arrival_rank, b.id) {
                off.push(format!(
                    "buyers {} and {} share arrival_rank {}",
                    other, b.id, b.arrival_rank
                ));
            }
            if !(b.required_quality > 0.0) {
                off.push(format!("{}: required_quality must be > 0", b.id));
            }
            if !(b.budget > 0.0) {
                off.push(format!("{}: budget must be > 0", b.id));
            }
            if !in_unit(b.attendance_prob) {
                off.push(format!("{}: attendance_prob must lie in [0,1]", b.id));
            }
        }
        let mut seen_sellers = BTreeMap::new();
        for s in &self.sellers {
            if seen_sellers.insert(s.id, ()).is_some() {
                off.push(format!("duplicate seller id {}", s.id));
            }
            if !in_unit(s.attendance_prob) {
                off.push(format!("{}: attendance_prob must lie in [0,1]", s.id));
            }
            if s.capacity < 1 {
                off.push(format!("{}: capacity must be >= 1", s.id));
            }
            s.workload.check(&mut off, &format!("{} workload", s.id));
            if s.q_plus.keys().ne(s.base_cost.keys()) {
                off.push(format!("{}: q_plus and base_cost keyed by different buyers", s.id));
            }
            for (b, q) in &s.q_plus {
                if !(*q > 0.0) {
                    off.push(format!("{}: q_plus for {} must be > 0", s.id, b));
                }
                if !seen_buyers.contains_key(b) {
                    off.push(format!("{}: references unknown buyer {}", s.id, b));
                }
            }
            for (b, c) in &s.base_cost {
                if !(*c > 0.0) {
                    off.push(format!("{}: base_cost for {} must be > 0", s.id, b));
                }
            }
        }
        let e = &self.econ;
        for (name, v) in [
            ("xi", e.xi),
            ("kappa", e.kappa),
            ("forward_margin", e.forward_margin),
            ("spot_margin", e.spot_margin),
            ("default_penalty", e.default_penalty),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                off.push(format!("econ.{name} must be >= 0"));
            }
        }
        if e.spot_margin < e.forward_margin {
            off.push("econ.spot_margin must be >= econ.forward_margin".to_string());
        }
        let r = &self.risk_bounds;
        for (name, v) in [
            ("eps_shortfall", r.eps_shortfall),
            ("eps_budget", r.eps_budget),
            ("eps_seller_loss", r.eps_seller_loss),
        ] {
            if !in_unit(v) {
                off.push(format!("risk_bounds.{name} must lie in [0,1]"));
            }
        }
        if self.limits.max_contracts_per_seller < 1 {
            off.push("limits.max_contracts_per_seller must be >= 1".to_string());
        }
        if !(self.limits.max_buyer_overbooking >= 0.0) {
            off.push("limits.max_buyer_overbooking must be >= 0".to_string());
        }
        if off.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(off))
        }
    }

    pub fn seller_index(&self, id: SellerId) -> Option<usize> {
        self.sellers.iter().position(|s| s.id == id)
    }

    pub fn buyer_index(&self, id: BuyerId) -> Option<usize> {
        self.buyers.iter().position(|b| b.id == id)
    }

    /// Buyer indices sorted by arrival rank (FCFS order).
    pub fn buyers_by_rank(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.buyers.len()).collect();
        order.sort_by_key(|&i| (self.buyers[i].arrival_rank, self.buyers[i].id));
        order
    }

    pub fn index(&self) -> ScenarioIndex {
        ScenarioIndex {
            sellers: self.sellers.iter().enumerate().map(|(i, s)| (s.id, i)).collect(),
            buyers: self.buyers.iter().enumerate().map(|(i, b)| (b.id, i)).collect(),
        }
    }

    /// Expected workload of each seller (aligned with `sellers`).
    pub fn expected_workloads(&self) -> Vec<f64> {
        self.sellers.iter().map(|s| s.workload.expected_value()).collect()
    }

    /// Price of a `(seller, buyer, level)` service at the given margin.
    pub fn price(&self, seller: usize, buyer: BuyerId, level: Level, margin: f64) -> Option<f64> {
        let s = &self.sellers[seller];
        let c = *s.base_cost.get(&buyer)?;
        Some(contract_price(
            level,
            c,
            self.econ.kappa,
            s.workload.expected_value(),
            margin,
        ))
    }
}

/// Id → position lookups for a scenario.
#[derive(Debug, Clone, Default)]
pub struct ScenarioIndex {
    pub sellers: HashMap<SellerId, usize>,
    pub buyers: HashMap<BuyerId, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardContract {
    pub seller_id: SellerId,
    pub buyer_id: BuyerId,
    pub level: Level,
    pub price: f64,
    pub penalty: f64,
}

impl ForwardContract {
    pub fn key(&self) -> (SellerId, BuyerId, Level) {
        (self.seller_id, self.buyer_id, self.level)
    }
}

/// Output of the forward phase. Kept sorted by `(seller, buyer, level)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContractSet {
    pub contracts: Vec<ForwardContract>,
}

impl ContractSet {
    pub fn new(mut contracts: Vec<ForwardContract>) -> Self {
        contracts.sort_by_key(|c| c.key());
        ContractSet { contracts }
    }

    pub fn is_empty(&self) -> bool {
        self.contracts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.contracts.len()
    }

    pub fn for_seller(&self, seller: SellerId) -> impl Iterator<Item = &ForwardContract> {
        self.contracts.iter().filter(move |c| c.seller_id == seller)
    }

    pub fn for_buyer(&self, buyer: BuyerId) -> impl Iterator<Item = &ForwardContract> {
        self.contracts.iter().filter(move |c| c.buyer_id == buyer)
    }

    /// Checks references, pair uniqueness, prices and penalties.
    pub fn validate(&self, scenario: &Scenario) -> Result<()> {
        let idx = scenario.index();
        let mut pairs = BTreeMap::new();
        for c in &self.contracts {
            let Some(&si) = idx.sellers.get(&c.seller_id) else {
                return Err(Error::Structural(format!(
                    "contract references unknown seller {}",
                    c.seller_id
                )));
            };
            if !idx.buyers.contains_key(&c.buyer_id) {
                return Err(Error::Structural(format!(
                    "contract references unknown buyer {}",
                    c.buyer_id
                )));
            }
            if !scenario.sellers[si].q_plus.contains_key(&c.buyer_id) {
                return Err(Error::Structural(format!(
                    "{} has no service terms for {}",
                    c.seller_id, c.buyer_id
                )));
            }
            if pairs.insert((c.seller_id, c.buyer_id), ()).is_some() {
                return Err(Error::Structural(format!(
                    "duplicate contract for pair ({}, {})",
                    c.seller_id, c.buyer_id
                )));
            }
            if !(c.price > 0.0) || !(c.penalty >= 0.0) {
                return Err(Error::Structural(format!(
                    "contract ({}, {}) needs price > 0 and penalty >= 0",
                    c.seller_id, c.buyer_id
                )));
            }
        }
        Ok(())
    }
}

/// One transaction's sampled randomness. Vectors are aligned with the
/// scenario's `sellers` / `buyers` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub transaction_index: u64,
    pub seller_present: Vec<bool>,
    pub buyer_present: Vec<bool>,
    pub workloads: Vec<f64>,
}

impl Realization {
    pub fn seller_attendance(&self, scenario: &Scenario) -> BTreeMap<SellerId, bool> {
        scenario
            .sellers
            .iter()
            .zip(&self.seller_present)
            .map(|(s, &p)| (s.id, p))
            .collect()
    }

    pub fn buyer_attendance(&self, scenario: &Scenario) -> BTreeMap<BuyerId, bool> {
        scenario
            .buyers
            .iter()
            .zip(&self.buyer_present)
            .map(|(b, &p)| (b.id, p))
            .collect()
    }

    pub fn workload_map(&self, scenario: &Scenario) -> BTreeMap<SellerId, f64> {
        scenario
            .sellers
            .iter()
            .zip(&self.workloads)
            .map(|(s, &l)| (s.id, l))
            .collect()
    }

    /// Short content digest, used to prove that methods saw the same draw.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.transaction_index.to_le_bytes());
        for p in &self.seller_present {
            h.update([*p as u8]);
        }
        for p in &self.buyer_present {
            h.update([*p as u8]);
        }
        for l in &self.workloads {
            h.update(l.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Draws attendance and workloads for one transaction. Every participant
/// consumes the same number of draws, so the stream stays aligned no matter
/// what the probabilities are.
pub fn sample_realization<R: Rng + ?Sized>(
    scenario: &Scenario,
    stream: &mut R,
    transaction_index: u64,
) -> Realization {
    let mut seller_present = Vec::with_capacity(scenario.sellers.len());
    let mut workloads = Vec::with_capacity(scenario.sellers.len());
    for s in &scenario.sellers {
        let u: f64 = stream.random();
        seller_present.push(u < s.attendance_prob);
        workloads.push(s.workload.sample(stream));
    }
    let buyer_present = scenario
        .buyers
        .iter()
        .map(|b| stream.random::<f64>() < b.attendance_prob)
        .collect();
    Realization {
        transaction_index,
        seller_present,
        buyer_present,
        workloads,
    }
}

pub fn realized_quality(level: Level, q_plus: f64, xi: f64, workload: f64) -> f64 {
    match level {
        Level::Plus => q_plus,
        Level::Minus => (q_plus - xi * workload).max(0.0),
    }
}

pub fn service_cost(level: Level, base_cost: f64, kappa: f64, workload: f64) -> f64 {
    match level {
        Level::Plus => base_cost + kappa * workload,
        Level::Minus => base_cost,
    }
}

pub fn expected_cost(level: Level, base_cost: f64, kappa: f64, expected_workload: f64) -> f64 {
    service_cost(level, base_cost, kappa, expected_workload)
}

/// Fixed price `(1 + margin) · E[cost]`, which leaves an expected profit of
/// `margin · E[cost]` per service.
pub fn contract_price(
    level: Level,
    base_cost: f64,
    kappa: f64,
    expected_workload: f64,
    margin: f64,
) -> f64 {
    (1.0 + margin) * expected_cost(level, base_cost, kappa, expected_workload)
}

pub fn seller_overbooking_rate(num_contracts: u32, capacity: u32) -> f64 {
    let capacity = capacity.max(1);
    num_contracts.saturating_sub(capacity) as f64 / capacity as f64
}

pub fn buyer_overbooking_rate(booked_expected_quality: f64, required_quality: f64) -> f64 {
    (booked_expected_quality - required_quality).max(0.0) / required_quality
}

/// Expected realized quality of one service, averaging the minus-level
/// degradation over the seller's workload law.
pub fn expected_quality(level: Level, q_plus: f64, xi: f64, workload: &TruncatedGaussianSpec) -> f64 {
    match level {
        Level::Plus => q_plus,
        Level::Minus => {
            // The clamp only bites when q⁺ < ξ·hi; integrate on a fine grid then.
            if q_plus - xi * workload.hi >= 0.0 {
                q_plus - xi * workload.expected_value()
            } else {
                let grid = workload.quantile_grid(256);
                grid.iter()
                    .map(|&l| realized_quality(Level::Minus, q_plus, xi, l))
                    .sum::<f64>()
                    / grid.len() as f64
            }
        }
    }
}

/// Σ over the buyer's contracts of `attendance · E[realized quality]`.
pub fn booked_expected_quality(scenario: &Scenario, contracts: &ContractSet, buyer: BuyerId) -> f64 {
    contracts
        .for_buyer(buyer)
        .filter_map(|c| {
            let s = &scenario.sellers[scenario.seller_index(c.seller_id)?];
            let q = *s.q_plus.get(&buyer)?;
            Some(s.attendance_prob * expected_quality(c.level, q, scenario.econ.xi, &s.workload))
        })
        .sum()
}

pub fn buyer_utility(received_qualities: &[f64]) -> f64 {
    received_qualities.iter().sum()
}

pub fn seller_utility(payments: &[f64], costs: &[f64], penalties_paid: &[f64]) -> f64 {
    payments.iter().sum::<f64>() - costs.iter().sum::<f64>() - penalties_paid.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn realized_quality_examples() {
        assert_eq!(realized_quality(Level::Plus, 4.5, 0.4, 2.5), 4.5);
        assert_abs_diff_eq!(realized_quality(Level::Minus, 4.5, 0.4, 2.5), 3.5, epsilon = 1e-12);
        assert_eq!(realized_quality(Level::Minus, 4.0, 0.5, 9.0), 0.0);
    }

    #[test]
    fn service_cost_examples() {
        assert_eq!(service_cost(Level::Minus, 1.2, 0.2, 3.0), 1.2);
        assert_abs_diff_eq!(service_cost(Level::Plus, 1.2, 0.2, 2.5), 1.7, epsilon = 1e-12);
        assert_eq!(service_cost(Level::Plus, 1.0, 0.0, 3.5), 1.0);
    }

    /// Midpoint quadrature of the truncated density, independent of the
    /// closed-form mean used by `expected_value`.
    fn quadrature_mean(spec: &TruncatedGaussianSpec) -> f64 {
        let n = 200_000;
        let h = (spec.hi - spec.lo) / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let x = spec.lo + (i as f64 + 0.5) * h;
            let z = (x - spec.mean) / spec.std_dev;
            let w = (-0.5 * z * z).exp();
            num += x * w;
            den += w;
        }
        num / den
    }

    #[test]
    fn contract_price_examples() {
        let spec = TruncatedGaussianSpec::default();
        let mean_l = quadrature_mean(&spec);
        assert_abs_diff_eq!(mean_l, 2.5, epsilon = 1e-9);
        // expected Plus cost from the quadrature oracle: 1.2 + 0.2·E[l] = 1.7
        let oracle_cost = 1.2 + 0.2 * mean_l;
        assert_abs_diff_eq!(1.25 * oracle_cost, 2.125, epsilon = 1e-9);
        assert_abs_diff_eq!(contract_price(Level::Plus, 1.2, 0.2, 2.5, 0.25), 2.125, epsilon = 1e-12);
        assert_abs_diff_eq!(contract_price(Level::Minus, 1.2, 0.2, 2.5, 0.25), 1.5, epsilon = 1e-12);
        assert_eq!(contract_price(Level::Minus, 1.0, 0.7, 9.0, 0.0), 1.0);
    }

    #[test]
    fn truncated_mean_matches_quadrature_asymmetric() {
        let spec = TruncatedGaussianSpec::new(2.5, 0.5, 2.0, 4.0).unwrap();
        assert_abs_diff_eq!(spec.expected_value(), quadrature_mean(&spec), epsilon = 1e-6);
        let far = TruncatedGaussianSpec::new(2.5, 0.5, 4.0, 5.0).unwrap();
        assert_abs_diff_eq!(far.expected_value(), quadrature_mean(&far), epsilon = 1e-6);
    }

    #[test]
    fn overbooking_examples() {
        assert_eq!(seller_overbooking_rate(3, 1), 2.0);
        assert_eq!(seller_overbooking_rate(1, 1), 0.0);
        assert_eq!(seller_overbooking_rate(4, 2), 1.0);
        assert_abs_diff_eq!(buyer_overbooking_rate(11.25, 7.5), 0.5, epsilon = 1e-12);
        assert_eq!(buyer_overbooking_rate(7.5, 7.5), 0.0);
        assert_eq!(buyer_overbooking_rate(6.0, 8.0), 0.0);
    }

    #[test]
    fn utility_examples() {
        assert_abs_diff_eq!(buyer_utility(&[4.2, 4.0]), 8.2, epsilon = 1e-12);
        assert_eq!(buyer_utility(&[]), 0.0);
        assert_eq!(buyer_utility(&[3.5]), 3.5);
        assert_abs_diff_eq!(seller_utility(&[1.5], &[1.2], &[]), 0.3, epsilon = 1e-12);
        let cost = 1.2 + 0.2 * 3.4;
        assert_abs_diff_eq!(seller_utility(&[2.125], &[cost], &[]), 0.245, epsilon = 1e-12);
        assert_eq!(seller_utility(&[], &[], &[]), 0.0);
    }

    pub(crate) fn small_scenario(attendance: f64) -> Scenario {
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
            econ: EconomicParams::default(),
            risk_bounds: RiskBounds::default(),
            limits: StructuralLimits::default(),
        }
    }

    #[test]
    fn degenerate_attendance_and_truncation() {
        let mut sc = small_scenario(1.0);
        sc.sellers[0].workload = TruncatedGaussianSpec::new(2.5, 0.5, 2.5, 2.5 + 1e-9).unwrap();
        let mut rng = stream(3, Purpose::Transaction, 0);
        for t in 0..100 {
            let r = sample_realization(&sc, &mut rng, t);
            assert!(r.seller_present.iter().all(|&p| p));
            assert_abs_diff_eq!(r.workloads[0], 2.5, epsilon = 1e-8);
        }
    }

    #[test]
    fn symmetric_truncation_mean() {
        let spec = TruncatedGaussianSpec::default();
        let mut rng = stream(99, Purpose::RiskSample, 0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = spec.sample(&mut rng);
            assert!((spec.lo..=spec.hi).contains(&x));
            sum += x;
        }
        assert_abs_diff_eq!(sum / n as f64, 2.5, epsilon = 0.01);
    }

    #[test]
    fn validation_lists_every_offense() {
        let mut sc = small_scenario(1.0);
        sc.sellers[0].attendance_prob = 1.5;
        sc.buyers[0].budget = -1.0;
        sc.econ.spot_margin = 0.1;
        match sc.validate() {
            Err(Error::Validation(list)) => assert_eq!(list.len(), 3, "{list:?}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn level_orderings(q in 0.1f64..10.0, xi in 0.0f64..1.0, l in 0.0f64..10.0,
                           c in 0.1f64..5.0, kappa in 0.0f64..1.0, margin in 0.0f64..2.0) {
            prop_assert!(realized_quality(Level::Minus, q, xi, l) <= realized_quality(Level::Plus, q, xi, l));
            let (cp, cm) = (service_cost(Level::Plus, c, kappa, l), service_cost(Level::Minus, c, kappa, l));
            prop_assert!(cp >= cm);
            prop_assert_eq!(cp == cm, kappa * l == 0.0);
            for level in Level::ALL {
                let p = contract_price(level, c, kappa, l, margin);
                let e = expected_cost(level, c, kappa, l);
                prop_assert!(p >= e);
                prop_assert_eq!(p == e, margin == 0.0);
            }
        }

        #[test]
        fn overbooking_nonnegative(n in 0u32..50, cap in 1u32..10, booked in 0.0f64..30.0, req in 0.1f64..20.0) {
            let s = seller_overbooking_rate(n, cap);
            prop_assert!(s >= 0.0);
            prop_assert_eq!(s == 0.0, n <= cap);
            let b = buyer_overbooking_rate(booked, req);
            prop_assert!(b >= 0.0);
            prop_assert_eq!(b == 0.0, booked <= req);
        }

        #[test]
        fn samples_within_bounds(mean in 0.0f64..5.0, sd in 0.05f64..3.0, lo in -2.0f64..4.0, width in 0.01f64..4.0, seed in any::<u64>()) {
            let spec = TruncatedGaussianSpec::new(mean, sd, lo, lo + width).unwrap();
            let mut rng = stream(seed, Purpose::RiskSample, 0);
            for _ in 0..50 {
                let x = spec.sample(&mut rng);
                prop_assert!(x >= spec.lo && x <= spec.hi);
            }
        }

        #[test]
        fn sampling_is_pure(seed in any::<u64>(), t in 0u64..1000) {
            let sc = small_scenario(0.6);
            let a = sample_realization(&sc, &mut stream(seed, Purpose::Transaction, t), t);
            let b = sample_realization(&sc, &mut stream(seed, Purpose::Transaction, t), t);
            prop_assert_eq!(a, b);
        }
    }
}
