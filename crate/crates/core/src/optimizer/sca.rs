//! Successive convex approximation on a continuous relaxation.
//!
//! Each buyer's forward quality (and payment) is treated as a sum of
//! independent terms `z · Bernoulli(a) · q̄`, which gives Gaussian stand-ins
//! for the shortfall and over-budget probabilities. In the solver the chance
//! constraints are used in their quantile form `μ ± k_ε σ`, which is convex
//! when `ε ≤ 0.5`; other non-convex pieces (the binarization pull and any
//! `ε > 0.5` quantile term) are linearized at the current iterate. Each
//! subproblem is a penalized, proximal, convex program solved by projected
//! gradient. The final iterate is rounded greedily with exact risk checks on
//! the common-random-number path.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{ForwardProblem, SellerEval, SolveResult, SolverKind, TraceRow};
use crate::error::Result;
use crate::market::{BuyerId, ContractSet, Level, SellerId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaParams {
    pub max_outer: u32,
    pub step_tol: f64,
    pub inner_tol: f64,
    pub max_inner: u32,
    /// Penalty weight at the first outer iteration.
    pub penalty_initial: f64,
    /// Multiplier applied to the penalty weight after each outer iteration.
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Binarization weight grows linearly: `binarize_rate · k`.
    pub binarize_rate: f64,
    pub proximal: f64,
}

impl Default for ScaParams {
    fn default() -> Self {
        ScaParams {
            max_outer: 50,
            step_tol: 1e-3,
            inner_tol: 1e-6,
            max_inner: 400,
            penalty_initial: 10.0,
            penalty_growth: 1.5,
            penalty_max: 1e4,
            binarize_rate: 0.05,
            proximal: 0.5,
        }
    }
}

/// Relaxed assignment, aligned with `ForwardProblem::candidates`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPoint {
    pub z: Vec<f64>,
}

impl RelaxedPoint {
    pub fn zeros(problem: &ForwardProblem) -> Self {
        RelaxedPoint {
            z: vec![0.0; problem.candidates.len()],
        }
    }

    /// Entries missing from `map` are zero; unknown keys are ignored.
    pub fn from_map(problem: &ForwardProblem, map: &BTreeMap<(SellerId, BuyerId, Level), f64>) -> Self {
        let z = problem
            .candidates
            .iter()
            .map(|c| {
                let key = (problem.scenario.sellers[c.seller].id, problem.scenario.buyers[c.buyer].id, c.level);
                map.get(&key).copied().unwrap_or(0.0).clamp(0.0, 1.0)
            })
            .collect();
        RelaxedPoint { z }
    }

    pub fn to_map(&self, problem: &ForwardProblem) -> BTreeMap<(SellerId, BuyerId, Level), f64> {
        problem
            .candidates
            .iter()
            .zip(&self.z)
            .map(|(c, &v)| ((problem.scenario.sellers[c.seller].id, problem.scenario.buyers[c.buyer].id, c.level), v))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuyerSurrogate {
    pub buyer: BuyerId,
    pub quality_mean: f64,
    pub quality_variance: f64,
    /// Φ((required − μ) / σ), or the 0/1 step when σ = 0.
    pub shortfall: f64,
    pub payment_mean: f64,
    pub payment_variance: f64,
    /// Φ((μ_pay − budget) / σ_pay), or the 0/1 step when σ = 0.
    pub over_budget: f64,
    /// Sparse gradients over candidate indices.
    pub shortfall_grad: Vec<(usize, f64)>,
    pub over_budget_grad: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogates {
    pub buyers: Vec<BuyerSurrogate>,
}

fn by_buyer(problem: &ForwardProblem) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); problem.scenario.buyers.len()];
    for (i, c) in problem.candidates.iter().enumerate() {
        out[c.buyer].push(i);
    }
    out
}

fn by_seller(problem: &ForwardProblem) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); problem.scenario.sellers.len()];
    for (i, c) in problem.candidates.iter().enumerate() {
        out[c.seller].push(i);
    }
    out
}

pub fn gaussian_surrogates(point: &RelaxedPoint, problem: &ForwardProblem) -> Surrogates {
    let n = Normal::standard();
    let sc = &problem.scenario;
    let groups = by_buyer(problem);
    let buyers = sc
        .buyers
        .iter()
        .enumerate()
        .map(|(bi, b)| {
            let (mut mu, mut var, mut mp, mut vp) = (0.0, 0.0, 0.0, 0.0);
            for &e in &groups[bi] {
                let c = &problem.candidates[e];
                let a = sc.sellers[c.seller].attendance_prob;
                let z = point.z[e];
                mu += z * a * c.expected_quality;
                var += z * z * c.expected_quality.powi(2) * a * (1.0 - a);
                mp += z * a * c.price;
                vp += z * z * c.price.powi(2) * a * (1.0 - a);
            }
            let (sd, sdp) = (var.sqrt(), vp.sqrt());
            let (shortfall, shortfall_grad) = if sd > 0.0 {
                let t = (b.required_quality - mu) / sd;
                let g = groups[bi]
                    .iter()
                    .map(|&e| {
                        let c = &problem.candidates[e];
                        let a = sc.sellers[c.seller].attendance_prob;
                        let v = c.expected_quality.powi(2) * a * (1.0 - a);
                        let dt = -a * c.expected_quality / sd - (b.required_quality - mu) * point.z[e] * v / sd.powi(3);
                        (e, n.pdf(t) * dt)
                    })
                    .collect();
                (n.cdf(t), g)
            } else {
                let step = if b.required_quality > mu { 1.0 } else { 0.0 };
                (step, groups[bi].iter().map(|&e| (e, 0.0)).collect())
            };
            let (over_budget, over_budget_grad) = if sdp > 0.0 {
                let u = (mp - b.budget) / sdp;
                let g = groups[bi]
                    .iter()
                    .map(|&e| {
                        let c = &problem.candidates[e];
                        let a = sc.sellers[c.seller].attendance_prob;
                        let v = c.price.powi(2) * a * (1.0 - a);
                        let du = a * c.price / sdp - (mp - b.budget) * point.z[e] * v / sdp.powi(3);
                        (e, n.pdf(u) * du)
                    })
                    .collect();
                (n.cdf(u), g)
            } else {
                let step = if mp > b.budget { 1.0 } else { 0.0 };
                (step, groups[bi].iter().map(|&e| (e, 0.0)).collect())
            };
            BuyerSurrogate {
                buyer: b.id,
                quality_mean: mu,
                quality_variance: var,
                shortfall,
                payment_mean: mp,
                payment_variance: vp,
                over_budget,
                shortfall_grad,
                over_budget_grad,
            }
        })
        .collect();
    Surrogates { buyers }
}

/// Quantile-form chance constraint `sign·μ(z) + k·σ(z) − rhs ≤ 0`, scaled by `scale`.
struct ChanceRow {
    entries: Vec<(usize, f64, f64)>, // (candidate, mean coefficient, variance coefficient)
    sign: f64,
    k: f64,
    rhs: f64,
    scale: f64,
}

impl ChanceRow {
    fn sigma(&self, z: &[f64]) -> f64 {
        (self.entries.iter().map(|&(e, _, v)| z[e] * z[e] * v).sum::<f64>() + 1e-12).sqrt()
    }

    fn mean(&self, z: &[f64]) -> f64 {
        self.entries.iter().map(|&(e, m, _)| z[e] * m).sum()
    }
}

/// Linear row `Σ coef·z − rhs ≤ 0`, scaled by `scale`.
struct LinearRow {
    entries: Vec<(usize, f64)>,
    rhs: f64,
    scale: f64,
}

struct Model {
    weights: Vec<f64>,
    chance: Vec<ChanceRow>,
    linear: Vec<LinearRow>,
    sellers: Vec<Vec<usize>>,
    seller_cap: Vec<f64>,
}

fn quantile_factor(eps: f64) -> Option<f64> {
    if eps >= 1.0 {
        return None;
    }
    Some(Normal::standard().inverse_cdf(1.0 - eps.clamp(1e-4, 1.0 - 1e-4)))
}

fn build_model(problem: &ForwardProblem) -> Model {
    let sc = &problem.scenario;
    let eps = problem.bounds();
    let wmax = problem
        .candidates
        .iter()
        .map(|c| c.value * sc.buyers[c.buyer].attendance_prob)
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let weights = problem
        .candidates
        .iter()
        .map(|c| c.value * sc.buyers[c.buyer].attendance_prob / wmax)
        .collect();
    let groups = by_buyer(problem);
    let mut chance = Vec::new();
    let mut linear = Vec::new();
    let caps = problem.booked_quality_cap();
    for (bi, b) in sc.buyers.iter().enumerate() {
        let attendance = |e: usize| sc.sellers[problem.candidates[e].seller].attendance_prob;
        if let Some(k) = quantile_factor(eps.eps_shortfall) {
            chance.push(ChanceRow {
                entries: groups[bi]
                    .iter()
                    .map(|&e| {
                        let (a, q) = (attendance(e), problem.candidates[e].expected_quality);
                        (e, a * q, q * q * a * (1.0 - a))
                    })
                    .collect(),
                sign: -1.0,
                k,
                rhs: -b.required_quality,
                scale: b.required_quality.max(1e-9),
            });
        }
        if let Some(k) = quantile_factor(eps.eps_budget) {
            chance.push(ChanceRow {
                entries: groups[bi]
                    .iter()
                    .map(|&e| {
                        let (a, p) = (attendance(e), problem.candidates[e].price);
                        (e, a * p, p * p * a * (1.0 - a))
                    })
                    .collect(),
                sign: 1.0,
                k,
                rhs: b.budget,
                scale: b.budget.max(1e-9),
            });
        }
        linear.push(LinearRow {
            entries: groups[bi].iter().map(|&e| (e, problem.candidates[e].value)).collect(),
            rhs: caps[bi],
            scale: caps[bi].max(1e-12),
        });
    }
    let sellers = by_seller(problem);
    for (si, s) in sc.sellers.iter().enumerate() {
        // expected load on the seller stays within its capacity
        linear.push(LinearRow {
            entries: sellers[si]
                .iter()
                .map(|&e| (e, sc.buyers[problem.candidates[e].buyer].attendance_prob))
                .collect(),
            rhs: s.capacity as f64,
            scale: s.capacity as f64,
        });
        // one level per (seller, buyer)
        let mut pairs: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &e in &sellers[si] {
            pairs.entry(problem.candidates[e].buyer).or_default().push(e);
        }
        for (_, es) in pairs {
            if es.len() > 1 {
                linear.push(LinearRow {
                    entries: es.iter().map(|&e| (e, 1.0)).collect(),
                    rhs: 1.0,
                    scale: 1.0,
                });
            }
        }
    }
    let seller_cap = vec![sc.limits.max_contracts_per_seller as f64; sc.sellers.len()];
    Model {
        weights,
        chance,
        linear,
        sellers,
        seller_cap,
    }
}

/// Convex model of the penalized objective around an anchor point.
struct Subproblem<'a> {
    model: &'a Model,
    anchor: &'a [f64],
    /// For rows with k < 0: σ(anchor) and its gradient (linearized).
    anchor_sigma: Vec<(f64, Vec<f64>)>,
    rho: f64,
    lambda: f64,
    prox: f64,
}

impl<'a> Subproblem<'a> {
    fn new(model: &'a Model, anchor: &'a [f64], rho: f64, lambda: f64, prox: f64) -> Self {
        let anchor_sigma = model
            .chance
            .iter()
            .map(|row| {
                let s = row.sigma(anchor);
                let g = row.entries.iter().map(|&(e, _, v)| anchor[e] * v / s).collect();
                (s, g)
            })
            .collect();
        Subproblem {
            model,
            anchor,
            anchor_sigma,
            rho,
            lambda,
            prox,
        }
    }

    fn chance_value(&self, idx: usize, z: &[f64]) -> (f64, Vec<f64>) {
        let row = &self.model.chance[idx];
        let (sigma, dsigma): (f64, Vec<f64>) = if row.k >= 0.0 {
            let s = row.sigma(z);
            (s, row.entries.iter().map(|&(e, _, v)| z[e] * v / s).collect())
        } else {
            let (s0, g0) = &self.anchor_sigma[idx];
            let lin = s0 + row.entries.iter().zip(g0).map(|(&(e, _, _), g)| g * (z[e] - self.anchor[e])).sum::<f64>();
            (lin, g0.clone())
        };
        let g = (row.sign * row.mean(z) + row.k * sigma - row.rhs) / row.scale;
        let grad = row
            .entries
            .iter()
            .zip(&dsigma)
            .map(|(&(_, m, _), ds)| (row.sign * m + row.k * ds) / row.scale)
            .collect();
        (g, grad)
    }

    fn value_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let m = self.model;
        let mut f = 0.0;
        for (i, g) in grad.iter_mut().enumerate() {
            let w = m.weights[i];
            let d = z[i] - self.anchor[i];
            f += -w * z[i] + self.lambda * (1.0 - 2.0 * self.anchor[i]) * z[i] + 0.5 * self.prox * d * d;
            *g = -w + self.lambda * (1.0 - 2.0 * self.anchor[i]) + self.prox * d;
        }
        for idx in 0..m.chance.len() {
            let (g, dg) = self.chance_value(idx, z);
            if g > 0.0 {
                f += self.rho * g * g;
                for (&(e, _, _), d) in m.chance[idx].entries.iter().zip(dg) {
                    grad[e] += 2.0 * self.rho * g * d;
                }
            }
        }
        for row in &m.linear {
            let g = (row.entries.iter().map(|&(e, c)| c * z[e]).sum::<f64>() - row.rhs) / row.scale;
            if g > 0.0 {
                f += self.rho * g * g;
                for &(e, c) in &row.entries {
                    grad[e] += 2.0 * self.rho * g * c / row.scale;
                }
            }
        }
        f
    }
}

/// Projection onto `{0 ≤ z ≤ 1, Σ z ≤ cap}` for each seller's block.
fn project(model: &Model, z: &mut [f64]) {
    for (si, block) in model.sellers.iter().enumerate() {
        let cap = model.seller_cap[si];
        for &e in block {
            z[e] = z[e].clamp(0.0, 1.0);
        }
        let sum: f64 = block.iter().map(|&e| z[e]).sum();
        if sum <= cap {
            continue;
        }
        let orig: Vec<f64> = block.iter().map(|&e| z[e]).collect();
        let (mut lo, mut hi) = (0.0, orig.iter().cloned().fold(0.0, f64::max));
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            let s: f64 = orig.iter().map(|&v| (v - mid).clamp(0.0, 1.0)).sum();
            if s > cap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        for (k, &e) in block.iter().enumerate() {
            z[e] = (orig[k] - hi).clamp(0.0, 1.0);
        }
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Projected gradient with backtracking on one convex subproblem.
fn solve_subproblem(sub: &Subproblem<'_>, start: &[f64], params: &ScaParams) -> Vec<f64> {
    let n = start.len();
    let mut z = start.to_vec();
    let mut grad = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut f = sub.value_grad(&z, &mut grad);
    let mut step = 1.0;
    for _ in 0..params.max_inner {
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = z.iter().zip(&grad).map(|(x, g)| x - step * g).collect();
            project(sub.model, &mut trial);
            let ft = sub.value_grad(&trial, &mut trial_grad);
            let lin: f64 = z.iter().zip(&trial).zip(&grad).map(|((x, t), g)| g * (t - x)).sum();
            let dist2: f64 = z.iter().zip(&trial).map(|(x, t)| (t - x) * (t - x)).sum();
            if ft <= f + lin + dist2 / (2.0 * step) + 1e-15 {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((next, fnext)) = accepted else { break };
        let moved = norm_diff(&next, &z);
        z = next;
        f = fnext;
        std::mem::swap(&mut grad, &mut trial_grad);
        if moved < params.inner_tol {
            break;
        }
        step = (step * 1.5).min(1e3);
    }
    z
}

/// Largest scaled constraint violation of the relaxation at `z`.
fn relaxed_violation(model: &Model, z: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for row in &model.chance {
        let g = (row.sign * row.mean(z) + row.k * row.sigma(z) - row.rhs) / row.scale;
        worst = worst.max(g);
    }
    for row in &model.linear {
        let g = (row.entries.iter().map(|&(e, c)| c * z[e]).sum::<f64>() - row.rhs) / row.scale;
        worst = worst.max(g);
    }
    worst.max(0.0)
}

pub fn solve_sca(problem: &ForwardProblem, params: ScaParams) -> Result<SolveResult> {
    let started = Instant::now();
    let model = build_model(problem);
    let n = problem.candidates.len();
    let mut z: Vec<f64> = (0..n).map(|_| 0.5).collect();
    project(&model, &mut z);
    let mut trace = Vec::new();
    let mut converged = n == 0;
    let mut rho = params.penalty_initial;
    for k in 0..params.max_outer {
        if n == 0 {
            trace.push(TraceRow {
                iteration: 0,
                objective: 0.0,
                violation: 0.0,
                step_norm: 0.0,
            });
            break;
        }
        let lambda = params.binarize_rate * k as f64;
        let anchor = z.clone();
        let sub = Subproblem::new(&model, &anchor, rho, lambda, params.proximal);
        let next = solve_subproblem(&sub, &anchor, &params);
        let step = norm_diff(&next, &anchor);
        z = next;
        let objective: f64 = problem
            .candidates
            .iter()
            .zip(&z)
            .map(|(c, v)| c.value * problem.scenario.buyers[c.buyer].attendance_prob * v)
            .sum();
        trace.push(TraceRow {
            iteration: k,
            objective,
            violation: relaxed_violation(&model, &z),
            step_norm: step,
        });
        rho = (rho * params.penalty_growth).min(params.penalty_max);
        if k > 0 && step < params.step_tol {
            converged = true;
            break;
        }
    }
    let point = RelaxedPoint { z };
    let contracts = round_and_repair(&point, problem);
    let finished = problem.finish(contracts, true)?;
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!(
            "relaxation did not converge within {} outer iterations",
            params.max_outer
        ));
    }
    if !finished.feasible {
        warnings.push("rounded assignment violates the risk constraints".to_string());
    }
    Ok(SolveResult {
        solver: SolverKind::Sca,
        contracts: finished.contracts,
        objective: finished.objective,
        feasible: finished.feasible,
        risk_report: finished.risk_report,
        certificate: finished.certificate,
        solver_trace: trace,
        wall_time: started.elapsed(),
        converged,
        nodes: 0,
        warnings,
    })
}

/// Entries below this are treated as zero when rounding.
const ROUNDING_FLOOR: f64 = 1e-9;

/// Incremental bookkeeping shared by the greedy pass and the fix-up pass.
struct Repair<'a> {
    problem: &'a ForwardProblem,
    samples: usize,
    s_count: f64,
    cap: usize,
    booked_cap: Vec<f64>,
    present: Vec<bool>,
    chosen: Vec<Vec<usize>>,
    evals: Vec<Option<SellerEval>>,
    booked: Vec<f64>,
    shortfall: Vec<f64>,
    /// Mean unmet requirement per buyer on the path.
    deficit: Vec<f64>,
}

impl<'a> Repair<'a> {
    fn new(problem: &'a ForwardProblem) -> Self {
        let sc = &problem.scenario;
        let samples = problem.path.len();
        let mut r = Repair {
            problem,
            samples,
            s_count: samples.max(1) as f64,
            cap: sc.limits.max_contracts_per_seller as usize,
            booked_cap: problem.booked_quality_cap(),
            present: problem.path.realizations.iter().flat_map(|r| r.buyer_present.iter().copied()).collect(),
            chosen: vec![Vec::new(); sc.sellers.len()],
            evals: vec![None; sc.sellers.len()],
            booked: vec![0.0; sc.buyers.len()],
            shortfall: Vec::new(),
            deficit: Vec::new(),
        };
        let zero = vec![0.0; samples];
        (r.shortfall, r.deficit) = (0..sc.buyers.len()).map(|b| r.shortfall_stats(&zero, b)).unzip();
        r
    }

    fn eps(&self) -> f64 {
        self.problem.bounds().eps_shortfall
    }

    fn nb(&self) -> usize {
        self.problem.scenario.buyers.len()
    }

    fn column(&self, buyer: usize, quality: bool) -> Vec<f64> {
        let nb = self.nb();
        let mut out = vec![0.0; self.samples];
        for ev in self.evals.iter().flatten() {
            let src = if quality { &ev.quality } else { &ev.payment };
            for (s, o) in out.iter_mut().enumerate() {
                *o += src[s * nb + buyer];
            }
        }
        out
    }

    /// Shortfall frequency and mean unmet requirement.
    fn shortfall_stats(&self, q: &[f64], buyer: usize) -> (f64, f64) {
        let nb = self.nb();
        let req = self.problem.scenario.buyers[buyer].required_quality;
        let (mut n, mut gap) = (0usize, 0.0);
        for s in (0..self.samples).filter(|&s| self.present[s * nb + buyer] && q[s] < req) {
            n += 1;
            gap += req - q[s];
        }
        (n as f64 / self.s_count, gap / self.s_count)
    }

    fn excess(&self, sf: f64) -> f64 {
        (sf - self.eps()).max(0.0)
    }

    fn buyers_of(&self, list: &[usize]) -> impl Iterator<Item = usize> + '_ {
        list.iter().map(|&x| self.problem.candidates[x].buyer).collect::<Vec<_>>().into_iter()
    }

    /// Replaces seller `m`'s contracts by `trial` when the seller-loss,
    /// over-budget and overbooking limits hold and no satisfied buyer is
    /// pushed over its shortfall bound. Returns the new shortfall frequency
    /// and deficit of every affected buyer, or `None` with the state untouched.
    fn try_set(&mut self, m: usize, trial: Vec<usize>, commit: bool) -> Option<Vec<(usize, f64, f64)>> {
        let p = self.problem;
        let sc = &p.scenario;
        let eps = *p.bounds();
        let nb = self.nb();
        let mut booked = self.booked.clone();
        for b in self.buyers_of(&self.chosen[m]).collect::<Vec<_>>() {
            let v = self.chosen[m].iter().find(|&&x| p.candidates[x].buyer == b).map(|&x| p.candidates[x].value);
            booked[b] -= v.unwrap_or(0.0);
        }
        for &x in &trial {
            let c = &p.candidates[x];
            booked[c.buyer] += c.value;
            if booked[c.buyer] > self.booked_cap[c.buyer] + 1e-9 {
                return None;
            }
        }
        let eval = p.seller_eval(m, &trial);
        if eval.losses as f64 / self.s_count > eps.eps_seller_loss {
            return None;
        }
        let mut affected: Vec<usize> = self.buyers_of(&trial).chain(self.buyers_of(&self.chosen[m])).collect();
        affected.sort_unstable();
        affected.dedup();
        let previous = self.evals[m].replace(eval);
        let mut status = Vec::new();
        for &b in &affected {
            let pay = self.column(b, false);
            let over = (0..self.samples)
                .filter(|&s| self.present[s * nb + b] && pay[s] > sc.buyers[b].budget)
                .count() as f64
                / self.s_count;
            let (sf, gap) = self.shortfall_stats(&self.column(b, true), b);
            let broken = self.shortfall[b] <= eps.eps_shortfall && sf > eps.eps_shortfall;
            if over > eps.eps_budget || broken {
                self.evals[m] = previous;
                return None;
            }
            status.push((b, sf, gap));
        }
        if commit {
            self.chosen[m] = trial;
            self.booked = booked;
            for &(b, sf, gap) in &status {
                self.shortfall[b] = sf;
                self.deficit[b] = gap;
            }
        } else {
            self.evals[m] = previous;
        }
        Some(status)
    }

    fn greedy(&mut self, order: &[usize]) {
        for &e in order {
            let cand = self.problem.candidates[e];
            let m = cand.seller;
            if self.chosen[m].len() >= self.cap || self.buyers_of(&self.chosen[m]).any(|b| b == cand.buyer) {
                continue;
            }
            let mut trial = self.chosen[m].clone();
            trial.push(e);
            trial.sort_unstable();
            self.try_set(m, trial, true);
        }
    }

    /// Drops contracts that never deliver on the sample path (the seller is
    /// always taken by higher-ranked buyers). They add nothing but still
    /// count against the overbooking cap.
    fn prune_dead(&mut self) {
        let nb = self.nb();
        for m in 0..self.chosen.len() {
            let Some(ev) = &self.evals[m] else { continue };
            let dead: Vec<usize> = self.chosen[m]
                .iter()
                .copied()
                .filter(|&x| {
                    let b = self.problem.candidates[x].buyer;
                    (0..self.samples).all(|s| ev.quality[s * nb + b] == 0.0 && ev.payment[s * nb + b] == 0.0)
                })
                .collect();
            if dead.is_empty() {
                continue;
            }
            let trial: Vec<usize> = self.chosen[m].iter().copied().filter(|x| !dead.contains(x)).collect();
            self.try_set(m, trial, true);
        }
    }

    /// Total shortfall excess, then total deficit of the buyers over their
    /// bound. Compared lexicographically.
    fn potential(&self, shortfall: &[f64], deficit: &[f64]) -> (f64, f64) {
        let eps = self.eps();
        let excess = shortfall.iter().map(|&sf| self.excess(sf)).sum();
        let gap = shortfall.iter().zip(deficit).filter(|(sf, _)| **sf > eps).map(|(_, d)| d).sum();
        (excess, gap)
    }

    /// Single-contract moves toward buyers still over their shortfall bound:
    /// sign an extra contract, or move one of a seller's contracts. A move is
    /// taken only if it lowers the potential. Satisfied buyers are never
    /// broken, so the set of violators only shrinks and the pass ends.
    fn fix_up(&mut self, support: &[usize]) {
        loop {
            if self.shortfall.iter().all(|&sf| sf <= self.eps()) {
                return;
            }
            self.prune_dead();
            let now = self.potential(&self.shortfall, &self.deficit);
            let mut best: Option<((f64, f64), usize, Vec<usize>)> = None;
            for &e in support {
                let cand = self.problem.candidates[e];
                if self.shortfall[cand.buyer] <= self.eps() {
                    continue;
                }
                let m = cand.seller;
                if self.buyers_of(&self.chosen[m]).any(|b| b == cand.buyer) {
                    continue;
                }
                for t in self.trials_with(m, e) {
                    let Some(status) = self.try_set(m, t.clone(), false) else {
                        continue;
                    };
                    let (mut sf, mut gap) = (self.shortfall.clone(), self.deficit.clone());
                    for (b, s, g) in status {
                        sf[b] = s;
                        gap[b] = g;
                    }
                    let after = self.potential(&sf, &gap);
                    let better = after.0 < now.0 - 1e-12 || (after.0 <= now.0 + 1e-12 && after.1 < now.1 - 1e-12);
                    let beats = best.as_ref().is_none_or(|(p, _, _)| after.0 < p.0 - 1e-12 || (after.0 <= p.0 + 1e-12 && after.1 < p.1 - 1e-12));
                    if better && beats {
                        best = Some((after, m, t));
                    }
                }
            }
            match best {
                Some((_, m, t)) => {
                    self.try_set(m, t, true);
                }
                None => return,
            }
        }
    }
}

impl Repair<'_> {
    fn mean_quality(&self, m: usize) -> f64 {
        self.evals[m].as_ref().map_or(0.0, |e| e.mean_quality)
    }

    /// Candidate trials for seller `m` gaining entry `e`: add it when below
    /// the cap, or let it replace one current contract.
    fn trials_with(&self, m: usize, e: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        if self.chosen[m].len() < self.cap {
            let mut t = self.chosen[m].clone();
            t.push(e);
            out.push(t);
        }
        for i in 0..self.chosen[m].len() {
            let mut t = self.chosen[m].clone();
            t[i] = e;
            out.push(t);
        }
        for t in &mut out {
            t.sort_unstable();
        }
        out
    }

    /// Best-improvement local search on expected quality over single
    /// add/replace moves from the support, never increasing any shortfall
    /// excess.
    fn improve(&mut self, support: &[usize]) {
        let nb = self.nb();
        let eps = self.eps();
        loop {
            let mut best: Option<(f64, usize, Vec<usize>)> = None;
            for &e in support {
                let cand = self.problem.candidates[e];
                let m = cand.seller;
                if self.chosen[m].contains(&e) {
                    continue;
                }
                let before = self.mean_quality(m);
                for t in self.trials_with(m, e) {
                    let mut seen = vec![false; nb];
                    if t.iter().any(|&x| std::mem::replace(&mut seen[self.problem.candidates[x].buyer], true)) {
                        continue;
                    }
                    let gain = self.problem.seller_eval(m, &t).mean_quality - before;
                    if gain <= 1e-9 || best.as_ref().is_some_and(|(g, _, _)| gain <= *g) {
                        continue;
                    }
                    let Some(status) = self.try_set(m, t.clone(), false) else {
                        continue;
                    };
                    if status.iter().all(|&(b, sf, _)| sf <= eps || sf <= self.shortfall[b]) {
                        best = Some((gain, m, t));
                    }
                }
            }
            match best {
                Some((_, m, t)) => {
                    self.try_set(m, t, true);
                }
                None => return,
            }
        }
    }
}

/// Greedy rounding: walk entries by decreasing `z` (ties by candidate order,
/// i.e. seller id, buyer id, level) and keep each one that leaves the
/// contract cap, the overbooking cap, the over-budget and seller-loss risks,
/// and every already-satisfied shortfall constraint intact on the sample path.
/// Buyers still over their shortfall bound afterwards get single-contract
/// moves drawn from the support of `z`, and a final local search over the
/// same moves raises expected quality where the limits allow.
pub fn round_and_repair(point: &RelaxedPoint, problem: &ForwardProblem) -> ContractSet {
    let mut order: Vec<usize> = (0..problem.candidates.len()).filter(|&e| point.z[e] > ROUNDING_FLOOR).collect();
    order.sort_by(|&a, &b| point.z[b].total_cmp(&point.z[a]).then(a.cmp(&b)));
    let mut repair = Repair::new(problem);
    repair.greedy(&order);
    order.sort_unstable();
    repair.fix_up(&order);
    repair.improve(&order);
    let all: Vec<usize> = repair.chosen.into_iter().flatten().collect();
    problem.contracts_from(&all)
}
