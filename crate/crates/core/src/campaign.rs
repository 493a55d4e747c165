//! Campaign replay: one forward solve, then T transactions per method over a
//! shared realization sequence, aggregated into a report.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::benchmarks::{run_improve_ie_with, run_mc_random, run_quality_prefer, run_spot_datad_with, MethodTag};
use crate::error::{Error, Result};
use crate::io::config::{CampaignConfig, ScenarioSource};
use crate::io::results::{
    json_bytes, log_artifacts, sha256_hex, write_results, Artifact, BuyerEvent, CampaignLogs, EventRecord, Manifest,
    SellerEvent, TimingRecord,
};
use crate::io::synthetic::generate_synthetic;
use crate::market::{sample_realization, BuyerId, ContractSet, Realization, Scenario, SellerId};
use crate::optimizer::{build_problem_with, solve_exact_ie, solve_sca, SolveResult, SolverKind};
use crate::risk::RiskReport;
use crate::rng::{stream, Purpose};
use crate::spot::{execute_transaction, SpotConfig, TransactionOutcome};

/// Value at nearest rank `ceil(p/100 · n)` of the ascending sample.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

impl TimeStats {
    pub fn from_secs(values: &[f64]) -> Option<Self> {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(TimeStats {
            mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
            median: nearest_rank(&v, 50.0)?,
            p95: nearest_rank(&v, 95.0)?,
            max: *v.last()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodTag,
    pub transactions: u64,
    pub mean_quality: f64,
    pub mean_payment: f64,
    pub mean_buyer_utility: f64,
    pub mean_seller_utility: f64,
    pub total_buyer_utility: f64,
    pub total_seller_utility: f64,
    /// Idle present sellers over present sellers, pooled across transactions.
    pub seller_idle_rate: f64,
    pub mean_volunteers: f64,
    pub mean_spot_services: f64,
    /// Final shortfall (after any spot phase), per buyer.
    pub shortfall_frequency: BTreeMap<BuyerId, f64>,
    /// Shortfall from forward contracts alone, per buyer.
    pub forward_shortfall_frequency: BTreeMap<BuyerId, f64>,
    pub over_budget_frequency: BTreeMap<BuyerId, f64>,
    pub seller_loss_frequency: BTreeMap<SellerId, f64>,
    pub unbalanced_transactions: u64,
    pub warnings: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardSummary {
    pub solver: SolverKind,
    pub contracts: usize,
    pub objective: f64,
    pub feasible: bool,
    pub converged: bool,
    pub nodes: u64,
    pub risk_report: RiskReport,
    pub certificate: Option<RiskReport>,
    pub warnings: Vec<String>,
}

impl ForwardSummary {
    fn of(r: &SolveResult) -> Self {
        ForwardSummary {
            solver: r.solver,
            contracts: r.contracts.len(),
            objective: r.objective,
            feasible: r.feasible,
            converged: r.converged,
            nodes: r.nodes,
            risk_report: r.risk_report.clone(),
            certificate: r.certificate.clone(),
            warnings: r.warnings.clone(),
        }
    }
}

/// Deterministic part of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub seed: u64,
    pub transactions: u64,
    pub methods: Vec<MethodSummary>,
    pub forward: Option<ForwardSummary>,
    pub diagnostics: Vec<String>,
}

/// Wall-clock part of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub forward_solve_s: Option<f64>,
    pub decision_time_s: BTreeMap<MethodTag, TimeStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub summary: CampaignSummary,
    pub timing: TimingSummary,
}

impl CampaignReport {
    /// Digest of the deterministic summary.
    pub fn digest(&self) -> String {
        sha256_hex(&json_bytes(&self.summary))
    }

    pub fn method(&self, m: MethodTag) -> Option<&MethodSummary> {
        self.summary.methods.iter().find(|s| s.method == m)
    }
}

fn freq<K: Ord + Copy>(counts: BTreeMap<K, u64>, t: u64) -> BTreeMap<K, f64> {
    counts.into_iter().map(|(k, c)| (k, c as f64 / t as f64)).collect()
}

/// Per-method metrics and timing statistics computed from the logs alone.
pub fn aggregate_metrics(logs: &CampaignLogs) -> Result<(Vec<MethodSummary>, BTreeMap<MethodTag, TimeStats>)> {
    let mut by_method: BTreeMap<MethodTag, Vec<&EventRecord>> = BTreeMap::new();
    for e in &logs.events {
        by_method.entry(e.method).or_default().push(e);
    }
    let lens: Vec<usize> = by_method.values().map(Vec::len).collect();
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Aggregation(format!(
            "methods logged different transaction counts: {:?}",
            by_method.iter().map(|(m, v)| (m.as_str(), v.len())).collect::<Vec<_>>()
        )));
    }
    let mut summaries = Vec::new();
    let mut timing = BTreeMap::new();
    for (method, events) in &by_method {
        let t = events.len() as u64;
        let n = t as f64;
        let mean = |f: &dyn Fn(&EventRecord) -> f64| events.iter().map(|e| f(e)).sum::<f64>() / n;
        let mut short = BTreeMap::new();
        let mut fshort = BTreeMap::new();
        let mut over = BTreeMap::new();
        for b in logs.buyers.iter().filter(|b| b.method == *method) {
            *short.entry(b.buyer).or_insert(0) += b.shortfall as u64;
            *fshort.entry(b.buyer).or_insert(0) += b.forward_shortfall as u64;
            *over.entry(b.buyer).or_insert(0) += b.over_budget as u64;
        }
        let mut loss = BTreeMap::new();
        for s in logs.sellers.iter().filter(|s| s.method == *method) {
            *loss.entry(s.seller).or_insert(0) += s.loss as u64;
        }
        let present: u64 = events.iter().map(|e| e.present_sellers as u64).sum();
        let idle: u64 = events.iter().map(|e| e.idle_sellers as u64).sum();
        let total_bu: f64 = events.iter().map(|e| e.buyer_utility).sum();
        let total_su: f64 = events.iter().map(|e| e.seller_utility).sum();
        summaries.push(MethodSummary {
            method: *method,
            transactions: t,
            mean_quality: mean(&|e| e.quality),
            mean_payment: mean(&|e| e.payment),
            mean_buyer_utility: total_bu / n,
            mean_seller_utility: total_su / n,
            total_buyer_utility: total_bu,
            total_seller_utility: total_su,
            seller_idle_rate: if present == 0 { 0.0 } else { idle as f64 / present as f64 },
            mean_volunteers: mean(&|e| e.volunteers as f64),
            mean_spot_services: mean(&|e| e.spot_services as f64),
            shortfall_frequency: freq(short, t),
            forward_shortfall_frequency: freq(fshort, t),
            over_budget_frequency: freq(over, t),
            seller_loss_frequency: freq(loss, t),
            unbalanced_transactions: events.iter().filter(|e| !e.ledger_balanced).count() as u64,
            warnings: events.iter().map(|e| e.warnings as u64).sum(),
        });
        let times: Vec<f64> = logs.timings.iter().filter(|x| x.method == *method).map(|x| x.decision_time_s).collect();
        if let Some(s) = TimeStats::from_secs(&times) {
            timing.insert(*method, s);
        }
    }
    Ok((summaries, timing))
}

/// Appends one outcome's rows to the logs.
pub fn log_outcome(logs: &mut CampaignLogs, method: MethodTag, scenario: &Scenario, r: &Realization, out: &TransactionOutcome) {
    let t = r.transaction_index;
    let forward_services: usize = out.fulfillment.served.values().map(Vec::len).sum();
    logs.events.push(EventRecord {
        method,
        transaction: t,
        realization: out.realization_digest.clone(),
        quality: out.total_quality(),
        payment: out.buyer_totals.values().map(|b| b.payment).sum(),
        buyer_utility: out.total_buyer_utility(),
        seller_utility: out.total_seller_utility(),
        present_buyers: r.buyer_present.iter().filter(|&&p| p).count() as u32,
        present_sellers: r.seller_present.iter().filter(|&&p| p).count() as u32,
        idle_sellers: out.idle_sellers(r, scenario) as u32,
        forward_services: forward_services as u32,
        spot_services: out.spot_assignments.len() as u32,
        volunteers: out.volunteers.len() as u32,
        shortfall_buyers: out.shortfall_flags.values().filter(|&&f| f).count() as u32,
        ledger_balanced: out.ledger.balanced(),
        warnings: out.warnings.len() as u32,
    });
    for (bi, b) in scenario.buyers.iter().enumerate() {
        let tot = out.buyer_totals[&b.id];
        logs.buyers.push(BuyerEvent {
            method,
            transaction: t,
            buyer: b.id,
            present: r.buyer_present[bi],
            quality: tot.quality,
            forward_quality: out.fulfillment.buyer_quality.get(&b.id).copied().unwrap_or(0.0),
            forward_payment: tot.forward_payment,
            spot_payment: tot.spot_payment,
            shortfall: out.shortfall_flags[&b.id],
            forward_shortfall: out.forward_shortfall_flags[&b.id],
            over_budget: out.over_budget_flags[&b.id],
        });
    }
    for (si, s) in scenario.sellers.iter().enumerate() {
        let tot = out.seller_totals[&s.id];
        logs.sellers.push(SellerEvent {
            method,
            transaction: t,
            seller: s.id,
            present: r.seller_present[si],
            tasks: tot.tasks,
            income: tot.income,
            cost: tot.cost,
            utility: tot.utility,
            loss: out.seller_loss_flags[&s.id],
        });
    }
    logs.timings.push(TimingRecord {
        method,
        transaction: t,
        decision_time_s: out.decision_time.as_secs_f64(),
    });
}

/// Builds or loads the scenario and applies the configured risk bounds.
pub fn load_scenario(cfg: &CampaignConfig) -> Result<Scenario> {
    let mut sc = match &cfg.scenario {
        ScenarioSource::File(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<Scenario>(&text).map_err(|e| Error::format(p, e))?
        }
        ScenarioSource::Synthetic { spec, seed } => generate_synthetic(spec, *seed)?,
    };
    sc.risk_bounds = cfg.risk;
    sc.validate()?;
    Ok(sc)
}

/// The shared realization sequence of a campaign.
pub fn realizations(scenario: &Scenario, seed: u64, transactions: u64) -> Vec<Realization> {
    (0..transactions)
        .map(|t| sample_realization(scenario, &mut stream(seed, Purpose::Transaction, t), t))
        .collect()
}

pub fn solve_forward(scenario: &Scenario, cfg: &CampaignConfig) -> Result<SolveResult> {
    let problem = build_problem_with(scenario, cfg.solver.problem_options(cfg.seed))?;
    match cfg.solver.kind {
        SolverKind::Sca => solve_sca(&problem, cfg.solver.sca_params()),
        SolverKind::Exact => solve_exact_ie(&problem, cfg.solver.exact_guards()),
    }
}

/// Replays a fixed contract set over `transactions` realizations drawn from
/// the campaign stream of `seed`, logging each as an IFAST transaction.
pub fn replay_contracts(scenario: &Scenario, contracts: &ContractSet, seed: u64, transactions: u64) -> Result<CampaignLogs> {
    scenario.validate()?;
    contracts.validate(scenario)?;
    let cfg = SpotConfig::from_scenario(scenario);
    let mut logs = CampaignLogs::default();
    for r in realizations(scenario, seed, transactions) {
        let out = execute_transaction(scenario, contracts, &r, &cfg)?;
        log_outcome(&mut logs, MethodTag::Ifast, scenario, &r, &out);
    }
    Ok(logs)
}

/// In-memory result of a campaign.
#[derive(Debug, Clone)]
pub struct CampaignRun {
    pub scenario: Scenario,
    pub realizations: Vec<Realization>,
    pub forward: Option<SolveResult>,
    pub outcomes: BTreeMap<MethodTag, Vec<TransactionOutcome>>,
    pub logs: CampaignLogs,
    pub report: CampaignReport,
}

/// Runs every configured method without touching the output directory.
pub fn simulate_campaign(cfg: &CampaignConfig) -> Result<CampaignRun> {
    let scenario = load_scenario(cfg)?;
    let reals = realizations(&scenario, cfg.seed, cfg.transactions);
    let spot_cfg = SpotConfig::from_scenario(&scenario);
    let mut diagnostics = Vec::new();
    let mut forward = None;
    let mut forward_time: Option<Duration> = None;
    let mut outcomes: BTreeMap<MethodTag, Vec<TransactionOutcome>> = BTreeMap::new();

    for &method in &cfg.methods {
        let mut outs = Vec::with_capacity(reals.len());
        match method {
            MethodTag::Ifast => {
                let started = Instant::now();
                let solved = match solve_forward(&scenario, cfg) {
                    Ok(r) => r,
                    Err(Error::Resource { message, incumbent: Some(best) }) => {
                        diagnostics.push(format!("IFAST: forward solve stopped early: {message}"));
                        *best
                    }
                    Err(e) => {
                        diagnostics.push(format!("IFAST skipped: forward solve failed: {e}"));
                        continue;
                    }
                };
                forward_time = Some(started.elapsed());
                let feasible = solved.feasible;
                let contracts: ContractSet = solved.contracts.clone();
                forward = Some(solved);
                if !feasible {
                    diagnostics.push(format!(
                        "IFAST skipped: forward problem infeasible at the configured risk bounds ({} contracts, max violation {:.4})",
                        contracts.len(),
                        forward.as_ref().map_or(0.0, |f| f.risk_report.max_violation(&scenario.risk_bounds))
                    ));
                    continue;
                }
                for r in &reals {
                    outs.push(execute_transaction(&scenario, &contracts, r, &spot_cfg)?);
                }
            }
            MethodTag::SpotDatad => {
                for r in &reals {
                    outs.push(run_spot_datad_with(&scenario, r, cfg.solver.sca_params())?);
                }
            }
            MethodTag::ImproveIe => {
                for r in &reals {
                    outs.push(run_improve_ie_with(&scenario, r, cfg.solver.exact_guards())?);
                }
            }
            MethodTag::QualityPrefer => {
                for r in &reals {
                    outs.push(run_quality_prefer(&scenario, r)?);
                }
            }
            MethodTag::McRandom => {
                for r in &reals {
                    let mut rng = stream(cfg.seed, Purpose::McRandom, r.transaction_index);
                    outs.push(run_mc_random(&scenario, r, &mut rng)?);
                }
            }
        }
        outcomes.insert(method, outs);
    }

    let mut logs = CampaignLogs::default();
    for (&method, outs) in &outcomes {
        for (r, out) in reals.iter().zip(outs) {
            log_outcome(&mut logs, method, &scenario, r, out);
        }
    }
    let (methods, decision) = aggregate_metrics(&logs)?;
    let report = CampaignReport {
        summary: CampaignSummary {
            seed: cfg.seed,
            transactions: cfg.transactions,
            methods,
            forward: forward.as_ref().map(ForwardSummary::of),
            diagnostics,
        },
        timing: TimingSummary {
            forward_solve_s: forward_time.map(|d| d.as_secs_f64()),
            decision_time_s: decision,
        },
    };
    Ok(CampaignRun {
        scenario,
        realizations: reals,
        forward,
        outcomes,
        logs,
        report,
    })
}

fn plot_quality(report: &CampaignReport) -> String {
    let mut s = String::from("method,mean_quality\n");
    for m in &report.summary.methods {
        s.push_str(&format!("{},{}\n", m.method, m.mean_quality));
    }
    s
}

/// Every artifact of a finished campaign.
pub fn campaign_artifacts(cfg: &CampaignConfig, run: &CampaignRun) -> Result<Vec<Artifact>> {
    let mut arts = vec![
        Artifact::stable("resolved_config.toml", cfg.to_toml()),
        Artifact::stable("scenario.json", json_bytes(&run.scenario)),
        Artifact::stable("summary.json", json_bytes(&run.report.summary)),
        Artifact::stable("plot_quality.csv", plot_quality(&run.report)),
        Artifact::volatile("timing_summary.json", json_bytes(&run.report.timing)),
    ];
    if let Some(f) = &run.forward {
        arts.push(Artifact::stable("forward_contracts.json", json_bytes(&f.contracts)));
        arts.push(Artifact::stable("forward_trace.csv", f.trace_csv()));
    }
    arts.extend(log_artifacts(&run.logs)?);
    Ok(arts)
}

/// Runs the campaign and persists its artifacts under `cfg.output_dir`.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<(CampaignRun, Manifest)> {
    let run = simulate_campaign(cfg)?;
    let manifest = write_results(&cfg.output_dir, &campaign_artifacts(cfg, &run)?)?;
    Ok((run, manifest))
}
