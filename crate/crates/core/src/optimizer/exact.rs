//! Implicit enumeration with bounding and feasibility pruning.
//!
//! Sellers are decided one at a time in id order. A seller's service depends
//! only on its own contracts and on buyer attendance, so each choice has a
//! fixed per-sample contribution that can be precomputed, and payments only
//! grow as more sellers are decided. That makes over-budget, seller-loss and
//! overbooking-cap violations safe to prune at inner nodes.

use std::time::Instant;

use super::{ForwardProblem, SellerEval, SolveResult, SolverKind, TraceRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactGuards {
    pub max_sellers: usize,
    pub max_nodes: u64,
    /// Disable the objective bound (feasibility pruning stays on).
    pub exhaustive: bool,
}

impl Default for ExactGuards {
    fn default() -> Self {
        ExactGuards {
            max_sellers: 24,
            max_nodes: 5_000_000,
            exhaustive: false,
        }
    }
}

const TIE: f64 = 1e-12;

fn freq_ok(count: u64, samples: u64, eps: f64) -> bool {
    count as f64 / samples.max(1) as f64 <= eps
}

struct Choice {
    choice: usize,
    eval: SellerEval,
    /// booked expected quality added per buyer
    booked: Vec<(usize, f64)>,
}

struct Search<'a> {
    problem: &'a ForwardProblem,
    guards: ExactGuards,
    order: Vec<usize>,
    options: Vec<Vec<Choice>>,
    /// suffix[d] = Σ_{k ≥ d} best option value
    suffix_value: Vec<f64>,
    /// suffix_quality[d][sample * nb + buyer] = Σ_{k ≥ d} max quality the seller can add
    suffix_quality: Vec<Vec<f64>>,
    samples: u64,
    nb: usize,
    budget_limit: Vec<f64>,
    required: Vec<f64>,
    booked_cap: Vec<f64>,
    present: Vec<bool>,
    nodes: u64,
    best: Option<(f64, Vec<usize>)>,
    trace: Vec<TraceRow>,
    exhausted: bool,
}

/// Whether every completion of `partial` is lexicographically after `incumbent`.
fn all_completions_after(partial: &[usize], incumbent: &[usize]) -> bool {
    for (a, b) in partial.iter().zip(incumbent) {
        if a != b {
            return a > b;
        }
    }
    partial.len() > incumbent.len()
}

impl<'a> Search<'a> {
    fn key(&self, picks: &[usize]) -> Vec<usize> {
        picks
            .iter()
            .enumerate()
            .flat_map(|(d, &o)| {
                let seller = self.order[d];
                self.problem.alphabet[seller][self.options[d][o].choice].iter().copied()
            })
            .collect()
    }

    fn dfs(&mut self, depth: usize, value: f64, quality: &[f64], payment: &[f64], booked: &[f64], picks: &mut Vec<usize>) {
        if self.exhausted {
            return;
        }
        let eps = *self.problem.bounds();
        if depth == self.order.len() {
            // shortfall is only decidable at a leaf
            for b in 0..self.nb {
                let misses = (0..self.samples as usize)
                    .filter(|&s| self.present[s * self.nb + b] && quality[s * self.nb + b] < self.required[b])
                    .count() as u64;
                if !freq_ok(misses, self.samples, eps.eps_shortfall) {
                    return;
                }
            }
            let key = self.key(picks);
            let better = match &self.best {
                None => true,
                Some((inc, inc_key)) => value > inc + TIE || ((value - inc).abs() <= TIE && key < *inc_key),
            };
            if better {
                self.trace.push(TraceRow {
                    iteration: self.trace.len() as u32,
                    objective: value,
                    violation: 0.0,
                    step_norm: 0.0,
                });
                self.best = Some((value, key));
            }
            return;
        }
        if let Some((inc, inc_key)) = &self.best {
            if !self.guards.exhaustive {
                let bound = value + self.suffix_value[depth];
                if bound < inc - TIE {
                    return;
                }
                if bound <= inc + TIE && all_completions_after(&self.key(picks), inc_key) {
                    return;
                }
            }
        }
        // optimistic shortfall check: even the best remaining help cannot fix it
        if eps.eps_shortfall < 1.0 {
            let rest = &self.suffix_quality[depth];
            for b in 0..self.nb {
                let misses = (0..self.samples as usize)
                    .filter(|&s| {
                        let i = s * self.nb + b;
                        self.present[i] && quality[i] + rest[i] < self.required[b]
                    })
                    .count() as u64;
                if !freq_ok(misses, self.samples, eps.eps_shortfall) {
                    return;
                }
            }
        }
        let n_opts = self.options[depth].len();
        let mut q_next = vec![0.0; quality.len()];
        let mut p_next = vec![0.0; payment.len()];
        for o in 0..n_opts {
            self.nodes += 1;
            if self.nodes > self.guards.max_nodes {
                self.exhausted = true;
                return;
            }
            let opt = &self.options[depth][o];
            let mut booked_next = booked.to_vec();
            if opt.booked.iter().any(|&(b, v)| {
                booked_next[b] += v;
                booked_next[b] > self.booked_cap[b] + 1e-9
            }) {
                continue;
            }
            let touched: Vec<usize> = opt.booked.iter().map(|&(b, _)| b).collect();
            q_next.copy_from_slice(quality);
            p_next.copy_from_slice(payment);
            let mut budget_ok = true;
            for &b in &touched {
                let mut over = 0u64;
                for s in 0..self.samples as usize {
                    let i = s * self.nb + b;
                    q_next[i] += opt.eval.quality[i];
                    p_next[i] += opt.eval.payment[i];
                    if p_next[i] > self.budget_limit[b] {
                        over += 1;
                    }
                }
                if !freq_ok(over, self.samples, eps.eps_budget) {
                    budget_ok = false;
                    break;
                }
            }
            if !budget_ok {
                continue;
            }
            let v = value + opt.eval.mean_quality;
            picks.push(o);
            self.dfs(depth + 1, v, &q_next, &p_next, &booked_next, picks);
            picks.pop();
            if self.exhausted {
                return;
            }
        }
    }
}

pub fn solve_exact_ie(problem: &ForwardProblem, guards: ExactGuards) -> Result<SolveResult> {
    solve_exact_with(problem, guards)
}

/// Exact solve; on node-budget exhaustion returns [`Error::Resource`] carrying
/// the incumbent.
pub fn solve_exact_with(problem: &ForwardProblem, guards: ExactGuards) -> Result<SolveResult> {
    let started = Instant::now();
    let sc = &problem.scenario;
    if sc.sellers.len() > guards.max_sellers {
        return Err(Error::Capacity(format!(
            "exact enumeration is limited to {} sellers, instance has {}",
            guards.max_sellers,
            sc.sellers.len()
        )));
    }
    if !problem.alphabet_complete() {
        return Err(Error::Capacity(
            "decision alphabet too large to enumerate; use the relaxation solver".into(),
        ));
    }
    let nb = sc.buyers.len();
    let samples = problem.path.len() as u64;
    let eps = *problem.bounds();

    let mut order: Vec<usize> = (0..sc.sellers.len()).collect();
    order.sort_by_key(|&i| sc.sellers[i].id);

    let mut options = Vec::with_capacity(order.len());
    for &si in &order {
        let mut opts: Vec<Choice> = problem.alphabet[si]
            .iter()
            .enumerate()
            .filter_map(|(ci, choice)| {
                let eval = problem.seller_eval(si, choice);
                if !freq_ok(eval.losses, samples, eps.eps_seller_loss) {
                    return None;
                }
                let booked = choice
                    .iter()
                    .map(|&c| (problem.candidates[c].buyer, problem.candidates[c].value))
                    .collect();
                Some(Choice { choice: ci, eval, booked })
            })
            .collect();
        // best first; alphabet order (lexicographic) breaks ties
        opts.sort_by(|a, b| b.eval.mean_quality.total_cmp(&a.eval.mean_quality).then(a.choice.cmp(&b.choice)));
        options.push(opts);
    }

    let depth = order.len();
    let mut suffix_value = vec![0.0; depth + 1];
    let cells = samples as usize * nb;
    let mut suffix_quality = vec![vec![0.0; cells]; depth + 1];
    for d in (0..depth).rev() {
        let best = options[d].iter().map(|o| o.eval.mean_quality).fold(0.0f64, f64::max);
        suffix_value[d] = suffix_value[d + 1] + best;
        let mut row = suffix_quality[d + 1].clone();
        for (i, cell) in row.iter_mut().enumerate() {
            *cell += options[d].iter().map(|o| o.eval.quality[i]).fold(0.0f64, f64::max);
        }
        suffix_quality[d] = row;
    }

    let present: Vec<bool> = problem
        .path
        .realizations
        .iter()
        .flat_map(|r| r.buyer_present.iter().copied())
        .collect();

    let mut search = Search {
        problem,
        guards,
        order,
        options,
        suffix_value,
        suffix_quality,
        samples,
        nb,
        budget_limit: sc.buyers.iter().map(|b| b.budget).collect(),
        required: sc.buyers.iter().map(|b| b.required_quality).collect(),
        booked_cap: problem.booked_quality_cap(),
        present,
        nodes: 0,
        best: None,
        trace: Vec::new(),
        exhausted: false,
    };
    let zeros = vec![0.0; cells];
    search.dfs(0, 0.0, &zeros, &zeros, &vec![0.0; nb], &mut Vec::new());

    let found = search.best.is_some();
    let chosen = search.best.as_ref().map(|(_, k)| k.clone()).unwrap_or_default();
    let finished = problem.finish(problem.contracts_from(&chosen), found)?;
    let mut warnings = Vec::new();
    if !found {
        warnings.push("no assignment satisfies the risk constraints".to_string());
    }
    let result = SolveResult {
        solver: SolverKind::Exact,
        contracts: finished.contracts,
        objective: finished.objective,
        feasible: finished.feasible,
        risk_report: finished.risk_report,
        certificate: finished.certificate,
        solver_trace: search.trace,
        wall_time: started.elapsed(),
        converged: !search.exhausted,
        nodes: search.nodes,
        warnings,
    };
    if search.exhausted {
        return Err(Error::Resource {
            message: format!("node budget of {} exhausted", guards.max_nodes),
            incumbent: Some(Box::new(result)),
        });
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::*;
    use super::*;
    use crate::market::{BuyerId, Level, SellerId};
    use crate::risk::compute_risks_exact;

    #[test]
    fn instance_a_optimum() {
        let p = build_problem_with(&instance_a(1.0), small_options()).unwrap();
        let r = solve_exact_ie(&p, ExactGuards::default()).unwrap();
        assert!(r.feasible);
        let keys: Vec<_> = r.contracts.contracts.iter().map(|c| c.key()).collect();
        assert_eq!(
            keys,
            vec![(SellerId(1), BuyerId(1), Level::Plus), (SellerId(2), BuyerId(1), Level::Plus)]
        );
        assert!((r.objective - 8.2).abs() < 1e-9);
        assert!(r.risk_report.probabilities().all(|p| p == 0.0));
    }

    /// Exhaustive scan of the 3 × 3 grid of seller choices with the exact
    /// risk backend: the oracle for instance A.
    #[test]
    fn instance_a_matches_grid_scan_oracle() {
        let sc = instance_a(1.0);
        let p = build_problem_with(&sc, small_options()).unwrap();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for c1 in &p.alphabet[0] {
            for c2 in &p.alphabet[1] {
                let chosen: Vec<usize> = c1.iter().chain(c2).copied().collect();
                let cs = p.contracts_from(&chosen);
                let risks = compute_risks_exact(&sc, &cs, 16).unwrap();
                if !risks.within(&sc.risk_bounds, 0.0) {
                    continue;
                }
                let q: f64 = crate::risk::expected_buyer_quality(&sc, &cs, &crate::risk::Backend::Exact { grid_points: 16 })
                    .unwrap()
                    .values()
                    .sum();
                if best.as_ref().is_none_or(|(b, _)| q > *b + 1e-12) {
                    best = Some((q, chosen));
                }
            }
        }
        let (q, chosen) = best.unwrap();
        assert!((q - 8.2).abs() < 1e-12);
        let r = solve_exact_ie(&p, ExactGuards::default()).unwrap();
        assert_eq!(r.contracts, p.contracts_from(&chosen));
    }

    #[test]
    fn instance_a_half_attendance_is_infeasible() {
        let p = build_problem_with(&instance_a(0.5), small_options()).unwrap();
        let r = solve_exact_ie(&p, ExactGuards::default()).unwrap();
        assert!(!r.feasible);
    }

    #[test]
    fn empty_buyer_set() {
        let mut sc = instance_a(1.0);
        sc.buyers.clear();
        for s in &mut sc.sellers {
            s.q_plus.clear();
            s.base_cost.clear();
        }
        // build without validation (a scenario needs buyers to validate)
        let path = crate::risk::SamplePath::monte_carlo(&sc, 10, 1, crate::rng::Purpose::RiskSample).unwrap();
        let p = ForwardProblem::assemble(sc, 0.25, small_options(), path, None);
        let r = solve_exact_ie(&p, ExactGuards::default()).unwrap();
        assert!(r.contracts.is_empty());
        assert_eq!(r.objective, 0.0);
        assert!(r.feasible);
    }

    #[test]
    fn node_budget_carries_incumbent() {
        let p = build_problem_with(&instance_a(1.0), small_options()).unwrap();
        let guards = ExactGuards {
            max_nodes: 2,
            ..ExactGuards::default()
        };
        match solve_exact_ie(&p, guards) {
            Err(Error::Resource { incumbent, .. }) => assert!(incumbent.is_some()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn completion_order_helper() {
        assert!(all_completions_after(&[3], &[1, 2]));
        assert!(!all_completions_after(&[1], &[1, 2]));
        assert!(all_completions_after(&[1, 2, 5], &[1, 2]));
        assert!(!all_completions_after(&[0, 9], &[1]));
    }
}
