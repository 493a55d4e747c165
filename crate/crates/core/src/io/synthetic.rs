//! Seeded synthetic markets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{
    BuyerId, BuyerProfile, EconomicParams, RiskBounds, Scenario, SellerId, SellerProfile, StructuralLimits,
    TruncatedGaussianSpec,
};
use crate::rng::{stream, Purpose, RandomStream};

/// Closed interval `[lo, hi]`; `lo == hi` is a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn check(&self, name: &str, off: &mut Vec<String>) {
        if !(self.lo.is_finite() && self.hi.is_finite()) {
            off.push(format!("{name}: bounds must be finite"));
        } else if self.lo > self.hi {
            off.push(format!("{name}: lower bound {} exceeds upper bound {}", self.lo, self.hi));
        }
    }

    pub fn draw(&self, rng: &mut RandomStream) -> f64 {
        if self.lo == self.hi {
            // keep the stream aligned whatever the width
            let _: f64 = rng.random();
            return self.lo;
        }
        self.lo + (self.hi - self.lo) * rng.random::<f64>()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

impl From<[f64; 2]> for Range {
    fn from(v: [f64; 2]) -> Self {
        Range::new(v[0], v[1])
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

/// Buyer-side draws shared by the synthetic generator and trace ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuyerSpec {
    pub buyers: u32,
    pub requirement: Range,
    pub budget: Range,
    pub attendance: f64,
}

impl Default for BuyerSpec {
    fn default() -> Self {
        BuyerSpec {
            buyers: 10,
            requirement: Range::new(7.5, 8.5),
            budget: Range::new(8.0, 10.0),
            attendance: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub sellers: u32,
    pub buyers: u32,
    pub q_plus: Range,
    pub xi: Range,
    pub base_cost: Range,
    pub budget: Range,
    pub requirement: Range,
    pub eps: Range,
    pub attendance: Range,
    pub buyer_attendance: f64,
    pub capacity: u32,
    pub workload: TruncatedGaussianSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            sellers: 20,
            buyers: 10,
            q_plus: Range::new(4.0, 5.0),
            xi: Range::new(0.3, 0.5),
            base_cost: Range::new(1.0, 1.5),
            budget: Range::new(8.0, 10.0),
            requirement: Range::new(7.5, 8.5),
            eps: Range::new(0.30, 0.40),
            attendance: Range::new(0.5, 0.95),
            buyer_attendance: 1.0,
            capacity: 1,
            workload: TruncatedGaussianSpec::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut off = Vec::new();
        if self.sellers < 1 {
            off.push("sellers must be >= 1".to_string());
        }
        if self.buyers < 1 {
            off.push("buyers must be >= 1".to_string());
        }
        if self.capacity < 1 {
            off.push("capacity must be >= 1".to_string());
        }
        for (name, r) in [
            ("q_plus", self.q_plus),
            ("xi", self.xi),
            ("base_cost", self.base_cost),
            ("budget", self.budget),
            ("requirement", self.requirement),
            ("eps", self.eps),
            ("attendance", self.attendance),
        ] {
            r.check(name, &mut off);
        }
        if !(0.0..=1.0).contains(&self.attendance.lo) || !(0.0..=1.0).contains(&self.attendance.hi) {
            off.push("attendance must lie within [0,1]".to_string());
        }
        if !(0.0..=1.0).contains(&self.buyer_attendance) {
            off.push("buyer_attendance must lie within [0,1]".to_string());
        }
        self.workload.check(&mut off, "workload");
        if off.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(off.join("; ")))
        }
    }
}

pub(crate) fn draw_buyers(spec: &BuyerSpec, rng: &mut RandomStream) -> Vec<BuyerProfile> {
    (1..=spec.buyers)
        .map(|i| {
            let required_quality = spec.requirement.draw(rng);
            let budget = spec.budget.draw(rng);
            BuyerProfile {
                id: BuyerId(i),
                required_quality,
                budget,
                arrival_rank: i,
                attendance_prob: spec.attendance,
            }
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = stream(seed, Purpose::Synthetic, 0);
    let xi = spec.xi.draw(&mut rng);
    let risk_bounds = RiskBounds {
        eps_shortfall: spec.eps.draw(&mut rng),
        eps_budget: spec.eps.draw(&mut rng),
        eps_seller_loss: spec.eps.draw(&mut rng),
    };
    let buyers = draw_buyers(
        &BuyerSpec {
            buyers: spec.buyers,
            requirement: spec.requirement,
            budget: spec.budget,
            attendance: spec.buyer_attendance,
        },
        &mut rng,
    );
    let sellers = (1..=spec.sellers)
        .map(|i| {
            let attendance_prob = spec.attendance.draw(&mut rng);
            let mut q_plus = std::collections::BTreeMap::new();
            let mut base_cost = std::collections::BTreeMap::new();
            for b in &buyers {
                q_plus.insert(b.id, spec.q_plus.draw(&mut rng));
                base_cost.insert(b.id, spec.base_cost.draw(&mut rng));
            }
            SellerProfile {
                id: SellerId(i),
                attendance_prob,
                workload: spec.workload,
                q_plus,
                base_cost,
                capacity: spec.capacity,
            }
        })
        .collect();
    let scenario = Scenario {
        sellers,
        buyers,
        econ: EconomicParams {
            xi,
            ..EconomicParams::default()
        },
        risk_bounds,
        limits: StructuralLimits::default(),
    };
    scenario.validate()?;
    Ok(scenario)
}
