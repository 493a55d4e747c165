//! One transaction: forward fulfillment, FCFS volunteers, temporary recruitment.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{
    buyer_utility, contract_price, realized_quality, seller_utility, service_cost, BuyerId, ContractSet, Level,
    Realization, Scenario, SellerId,
};
use crate::risk::{simulate_fulfillment, FulfillmentOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Eligibility {
    /// Attendant sellers with no task in this transaction.
    IdleAttendantSellers,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotConfig {
    pub spot_margin: f64,
    pub spot_level: Level,
    pub eligibility: Eligibility,
}

impl SpotConfig {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        SpotConfig {
            spot_margin: scenario.econ.spot_margin,
            spot_level: Level::Plus,
            eligibility: Eligibility::IdleAttendantSellers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.spot_margin >= 0.0) {
            errs.push(format!("spot_margin must be >= 0, got {}", self.spot_margin));
        }
        if self.spot_level != Level::Plus {
            errs.push("spot_level must be plus".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Spot price of `seller` serving `buyer` at `level`, if the pair is defined.
pub fn spot_price(scenario: &Scenario, seller: usize, buyer: BuyerId, level: Level, margin: f64) -> Option<f64> {
    let s = &scenario.sellers[seller];
    let c = *s.base_cost.get(&buyer)?;
    Some(contract_price(level, c, scenario.econ.kappa, s.workload.expected_value(), margin))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotAssignment {
    pub buyer_id: BuyerId,
    pub seller_id: SellerId,
    pub level: Level,
    pub quality: f64,
    pub price: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BuyerTotals {
    pub quality: f64,
    pub forward_payment: f64,
    pub spot_payment: f64,
    pub payment: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SellerTotals {
    pub tasks: u32,
    pub income: f64,
    pub cost: f64,
    pub penalty: f64,
    pub utility: f64,
}

/// Money moved in a transaction, in integer nanounits so the two sides
/// compare exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub buyers_paid: i64,
    pub sellers_received: i64,
}

impl Ledger {
    pub fn balanced(&self) -> bool {
        self.buyers_paid == self.sellers_received
    }
}

pub fn to_nanos(amount: f64) -> i64 {
    (amount * 1e9).round() as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionOutcome {
    pub transaction_index: u64,
    pub realization_digest: String,
    pub fulfillment: FulfillmentOutcome,
    pub volunteers: Vec<BuyerId>,
    pub spot_assignments: Vec<SpotAssignment>,
    pub buyer_totals: BTreeMap<BuyerId, BuyerTotals>,
    pub seller_totals: BTreeMap<SellerId, SellerTotals>,
    #[serde(with = "crate::optimizer::duration_secs")]
    pub decision_time: Duration,
    /// Present buyers below requirement after the spot phase.
    pub shortfall_flags: BTreeMap<BuyerId, bool>,
    /// Present buyers below requirement from forward contracts alone.
    pub forward_shortfall_flags: BTreeMap<BuyerId, bool>,
    /// Present buyers whose forward payment exceeds the budget.
    pub over_budget_flags: BTreeMap<BuyerId, bool>,
    /// Sellers that served a forward task at a net loss.
    pub seller_loss_flags: BTreeMap<SellerId, bool>,
    pub ledger: Ledger,
    pub warnings: Vec<String>,
}

impl TransactionOutcome {
    pub fn total_quality(&self) -> f64 {
        self.buyer_totals.values().map(|b| b.quality).sum()
    }

    pub fn total_buyer_utility(&self) -> f64 {
        self.buyer_totals.values().map(|b| b.utility).sum()
    }

    pub fn total_seller_utility(&self) -> f64 {
        self.seller_totals.values().map(|s| s.utility).sum()
    }

    /// Present sellers that delivered nothing.
    pub fn idle_sellers(&self, realization: &Realization, scenario: &Scenario) -> usize {
        scenario
            .sellers
            .iter()
            .enumerate()
            .filter(|(i, s)| realization.seller_present[*i] && self.seller_totals.get(&s.id).is_none_or(|t| t.tasks == 0))
            .count()
    }
}

/// Present buyers still short of their requirement, by arrival rank.
pub fn select_volunteers(fulfillment: &FulfillmentOutcome, scenario: &Scenario, realization: &Realization) -> Vec<BuyerId> {
    let mut out: Vec<(u32, BuyerId)> = scenario
        .buyers
        .iter()
        .enumerate()
        .filter(|(i, b)| {
            realization.buyer_present[*i]
                && fulfillment.buyer_quality.get(&b.id).copied().unwrap_or(0.0) < b.required_quality
        })
        .map(|(_, b)| (b.arrival_rank, b.id))
        .collect();
    out.sort();
    out.into_iter().map(|(_, id)| id).collect()
}

/// Eligible temporary sellers: present and idle in `fulfillment`, by id.
pub fn recruitment_pool(fulfillment: &FulfillmentOutcome, scenario: &Scenario, realization: &Realization) -> Vec<SellerId> {
    let mut pool: Vec<SellerId> = scenario
        .sellers
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            realization.seller_present[*i] && fulfillment.served.get(&s.id).is_none_or(|v| v.is_empty())
        })
        .map(|(_, s)| s.id)
        .collect();
    pool.sort();
    pool
}

/// Greedy quality-per-price recruitment for one volunteer. Recruited sellers
/// are removed from `pool`.
#[allow(clippy::too_many_arguments)]
pub fn recruit_temporary(
    scenario: &Scenario,
    volunteer: BuyerId,
    received_quality: f64,
    pool: &mut Vec<SellerId>,
    remaining_budget: f64,
    realization: &Realization,
    cfg: &SpotConfig,
) -> Result<Vec<SpotAssignment>> {
    let b = scenario
        .buyer_index(volunteer)
        .map(|i| &scenario.buyers[i])
        .ok_or_else(|| Error::Structural(format!("unknown buyer {volunteer}")))?;
    let mut quality = received_quality;
    let mut budget = remaining_budget;
    let mut out = Vec::new();
    while quality < b.required_quality {
        let mut best: Option<(f64, usize, usize, f64, f64)> = None; // ratio, pool slot, seller idx, q, price
        for (slot, sid) in pool.iter().enumerate() {
            let si = scenario
                .seller_index(*sid)
                .ok_or_else(|| Error::Structural(format!("unknown seller {sid}")))?;
            let Some(&q) = scenario.sellers[si].q_plus.get(&volunteer) else { continue };
            let Some(price) = spot_price(scenario, si, volunteer, cfg.spot_level, cfg.spot_margin) else { continue };
            if price > budget {
                continue;
            }
            let ratio = q / price;
            if best.is_none_or(|(r, ..)| ratio > r) {
                best = Some((ratio, slot, si, q, price));
            }
        }
        let Some((_, slot, si, q_plus, price)) = best else { break };
        let s = &scenario.sellers[si];
        let workload = realization.workloads[si];
        let q = realized_quality(cfg.spot_level, q_plus, scenario.econ.xi, workload);
        out.push(SpotAssignment {
            buyer_id: volunteer,
            seller_id: s.id,
            level: cfg.spot_level,
            quality: q,
            price,
            cost: service_cost(cfg.spot_level, s.base_cost[&volunteer], scenario.econ.kappa, workload),
        });
        quality += q;
        budget -= price;
        pool.remove(slot);
    }
    Ok(out)
}

/// Builds totals, flags and the ledger from the forward and spot phases.
pub(crate) fn settle(
    scenario: &Scenario,
    realization: &Realization,
    fulfillment: FulfillmentOutcome,
    volunteers: Vec<BuyerId>,
    spot_assignments: Vec<SpotAssignment>,
    decision_time: Duration,
) -> Result<TransactionOutcome> {
    let mut buyers: BTreeMap<BuyerId, (Vec<f64>, BuyerTotals)> =
        scenario.buyers.iter().map(|b| (b.id, (Vec::new(), BuyerTotals::default()))).collect();
    let mut sellers: BTreeMap<SellerId, (Vec<f64>, Vec<f64>, SellerTotals)> =
        scenario.sellers.iter().map(|s| (s.id, (Vec::new(), Vec::new(), SellerTotals::default()))).collect();
    let mut ledger = Ledger::default();
    let mut forward_loss: BTreeMap<SellerId, bool> = BTreeMap::new();

    for (sid, services) in &fulfillment.served {
        let (pay, cost, tot) = sellers
            .get_mut(sid)
            .ok_or_else(|| Error::Structural(format!("unknown seller {sid}")))?;
        let penalty = fulfillment.seller_penalty.get(sid).copied().unwrap_or(0.0);
        for sv in services {
            let (q, bt) = buyers
                .get_mut(&sv.buyer_id)
                .ok_or_else(|| Error::Structural(format!("unknown buyer {}", sv.buyer_id)))?;
            q.push(sv.quality);
            bt.forward_payment += sv.price;
            pay.push(sv.price);
            cost.push(sv.cost);
            tot.tasks += 1;
            ledger.buyers_paid += to_nanos(sv.price);
            ledger.sellers_received += to_nanos(sv.price);
        }
        tot.penalty = penalty;
        let forward_net = seller_utility(pay, cost, &[penalty]);
        forward_loss.insert(*sid, !services.is_empty() && forward_net < 0.0);
    }
    for a in &spot_assignments {
        let (q, bt) = buyers
            .get_mut(&a.buyer_id)
            .ok_or_else(|| Error::Structural(format!("unknown buyer {}", a.buyer_id)))?;
        q.push(a.quality);
        bt.spot_payment += a.price;
        let (pay, cost, tot) = sellers
            .get_mut(&a.seller_id)
            .ok_or_else(|| Error::Structural(format!("unknown seller {}", a.seller_id)))?;
        pay.push(a.price);
        cost.push(a.cost);
        tot.tasks += 1;
        ledger.buyers_paid += to_nanos(a.price);
        ledger.sellers_received += to_nanos(a.price);
    }

    let mut shortfall_flags = BTreeMap::new();
    let mut forward_shortfall_flags = BTreeMap::new();
    let mut over_budget_flags = BTreeMap::new();
    let mut buyer_totals = BTreeMap::new();
    for (bi, b) in scenario.buyers.iter().enumerate() {
        let (qs, mut bt) = buyers.remove(&b.id).unwrap_or_default();
        bt.quality = qs.iter().sum();
        bt.payment = bt.forward_payment + bt.spot_payment;
        bt.utility = buyer_utility(&qs);
        let present = realization.buyer_present[bi];
        let forward_q = fulfillment.buyer_quality.get(&b.id).copied().unwrap_or(0.0);
        shortfall_flags.insert(b.id, present && bt.quality < b.required_quality);
        forward_shortfall_flags.insert(b.id, present && forward_q < b.required_quality);
        over_budget_flags.insert(b.id, present && bt.forward_payment > b.budget);
        buyer_totals.insert(b.id, bt);
    }
    let mut seller_totals = BTreeMap::new();
    let mut seller_loss_flags = BTreeMap::new();
    for s in &scenario.sellers {
        let (pay, cost, mut tot) = sellers.remove(&s.id).unwrap_or_default();
        tot.income = pay.iter().sum();
        tot.cost = cost.iter().sum();
        tot.utility = seller_utility(&pay, &cost, &[tot.penalty]);
        if tot.tasks > s.capacity {
            return Err(Error::Capacity(format!(
                "seller {} assigned {} tasks with capacity {}",
                s.id, tot.tasks, s.capacity
            )));
        }
        seller_loss_flags.insert(s.id, forward_loss.get(&s.id).copied().unwrap_or(false));
        seller_totals.insert(s.id, tot);
    }
    Ok(TransactionOutcome {
        transaction_index: realization.transaction_index,
        realization_digest: realization.digest(),
        fulfillment,
        volunteers,
        spot_assignments,
        buyer_totals,
        seller_totals,
        decision_time,
        shortfall_flags,
        forward_shortfall_flags,
        over_budget_flags,
        seller_loss_flags,
        ledger,
        warnings: Vec::new(),
    })
}

pub fn execute_transaction(
    scenario: &Scenario,
    contracts: &ContractSet,
    realization: &Realization,
    cfg: &SpotConfig,
) -> Result<TransactionOutcome> {
    cfg.validate()?;
    let fulfillment = simulate_fulfillment(scenario, contracts, realization)?;
    let started = Instant::now();
    let volunteers = select_volunteers(&fulfillment, scenario, realization);
    let mut pool = recruitment_pool(&fulfillment, scenario, realization);
    let mut spot = Vec::new();
    for &v in &volunteers {
        let b = &scenario.buyers[scenario.buyer_index(v).expect("volunteer comes from the scenario")];
        let received = fulfillment.buyer_quality.get(&v).copied().unwrap_or(0.0);
        let forward_paid = fulfillment.buyer_payment.get(&v).copied().unwrap_or(0.0);
        spot.extend(recruit_temporary(
            scenario,
            v,
            received,
            &mut pool,
            b.budget - forward_paid,
            realization,
            cfg,
        )?);
    }
    let decision_time = started.elapsed();
    settle(scenario, realization, fulfillment, volunteers, spot, decision_time)
}
