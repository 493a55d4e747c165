//! Campaign configuration: a strict TOML schema with every offense reported.
//!
//! ```toml
//! seed = 42                       # required
//! transactions = 300
//! methods = ["IFAST", "SPOT_DATAD", "IMPROVE_IE", "QUALITY_PREFER", "MC_RANDOM"]
//! output_dir = "results"
//!
//! [scenario]                      # exactly one of `file` or `[scenario.synthetic]`
//! file = "scenario.json"
//!
//! [scenario.synthetic]
//! sellers = 20
//! buyers = 10
//! seed = 42                       # defaults to the top-level seed
//! q_plus = [4.0, 5.0]
//! xi = [0.3, 0.5]
//! base_cost = [1.0, 1.5]
//! budget = [8.0, 10.0]
//! requirement = [7.5, 8.5]
//! eps = [0.30, 0.40]
//! attendance = [0.5, 0.95]
//! buyer_attendance = 1.0
//! capacity = 1
//! workload = { mean = 2.5, std_dev = 0.5, lo = 1.5, hi = 3.5 }
//!
//! [risk]                          # `eps` sets all three; specific keys override
//! eps = 0.35
//! eps_shortfall = 0.35
//! eps_budget = 0.35
//! eps_seller_loss = 0.35
//!
//! [solver]
//! kind = "sca"                    # or "exact"
//! samples = 2000
//! certify_samples = 10000
//! max_outer = 50
//! step_tol = 1e-3
//! inner_tol = 1e-6
//! max_nodes = 5000000
//! max_sellers = 24
//! ```
//!
//! Relative `file` and `output_dir` paths are resolved against the config's
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::synthetic::{Range, SyntheticSpec};
use crate::benchmarks::MethodTag;
use crate::error::{Error, Result};
use crate::market::{RiskBounds, TruncatedGaussianSpec};
use crate::optimizer::{ExactGuards, ProblemOptions, ScaParams, SolverKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScenarioSource {
    File(PathBuf),
    Synthetic { spec: SyntheticSpec, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub samples: u64,
    pub certify_samples: u64,
    pub max_outer: u32,
    pub step_tol: f64,
    pub inner_tol: f64,
    pub max_nodes: u64,
    pub max_sellers: u32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let sca = ScaParams::default();
        let ie = ExactGuards::default();
        let opts = ProblemOptions::default();
        SolverConfig {
            kind: SolverKind::Sca,
            samples: opts.samples,
            certify_samples: opts.certify_samples,
            max_outer: sca.max_outer,
            step_tol: sca.step_tol,
            inner_tol: sca.inner_tol,
            max_nodes: ie.max_nodes,
            max_sellers: ie.max_sellers as u32,
        }
    }
}

impl SolverConfig {
    pub fn sca_params(&self) -> ScaParams {
        ScaParams {
            max_outer: self.max_outer,
            step_tol: self.step_tol,
            inner_tol: self.inner_tol,
            ..ScaParams::default()
        }
    }

    pub fn exact_guards(&self) -> ExactGuards {
        ExactGuards {
            max_nodes: self.max_nodes,
            max_sellers: self.max_sellers as usize,
            ..ExactGuards::default()
        }
    }

    pub fn problem_options(&self, seed: u64) -> ProblemOptions {
        ProblemOptions {
            samples: self.samples,
            certify_samples: self.certify_samples,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub seed: u64,
    pub transactions: u64,
    pub methods: Vec<MethodTag>,
    pub output_dir: PathBuf,
    pub scenario: ScenarioSource,
    pub risk: RiskBounds,
    pub solver: SolverConfig,
}

impl CampaignConfig {
    /// Config with every default and the given scenario source.
    pub fn new(seed: u64, scenario: ScenarioSource) -> Self {
        CampaignConfig {
            seed,
            transactions: 300,
            methods: MethodTag::ALL.to_vec(),
            output_dir: PathBuf::from("results"),
            scenario,
            risk: RiskBounds::default(),
            solver: SolverConfig::default(),
        }
    }

    /// Fully expanded TOML; loading it back yields the same config.
    pub fn to_toml(&self) -> String {
        let mut root = Table::new();
        root.insert("seed".into(), Value::Integer(self.seed as i64));
        root.insert("transactions".into(), Value::Integer(self.transactions as i64));
        root.insert(
            "methods".into(),
            Value::Array(self.methods.iter().map(|m| Value::String(m.as_str().into())).collect()),
        );
        root.insert("output_dir".into(), Value::String(self.output_dir.display().to_string()));
        let mut scenario = Table::new();
        match &self.scenario {
            ScenarioSource::File(p) => {
                scenario.insert("file".into(), Value::String(p.display().to_string()));
            }
            ScenarioSource::Synthetic { spec, seed } => {
                let range = |r: Range| Value::Array(vec![Value::Float(r.lo), Value::Float(r.hi)]);
                let mut s = Table::new();
                s.insert("sellers".into(), Value::Integer(spec.sellers as i64));
                s.insert("buyers".into(), Value::Integer(spec.buyers as i64));
                s.insert("seed".into(), Value::Integer(*seed as i64));
                for (k, r) in [
                    ("q_plus", spec.q_plus),
                    ("xi", spec.xi),
                    ("base_cost", spec.base_cost),
                    ("budget", spec.budget),
                    ("requirement", spec.requirement),
                    ("eps", spec.eps),
                    ("attendance", spec.attendance),
                ] {
                    s.insert(k.into(), range(r));
                }
                s.insert("buyer_attendance".into(), Value::Float(spec.buyer_attendance));
                s.insert("capacity".into(), Value::Integer(spec.capacity as i64));
                let mut w = Table::new();
                w.insert("mean".into(), Value::Float(spec.workload.mean));
                w.insert("std_dev".into(), Value::Float(spec.workload.std_dev));
                w.insert("lo".into(), Value::Float(spec.workload.lo));
                w.insert("hi".into(), Value::Float(spec.workload.hi));
                s.insert("workload".into(), Value::Table(w));
                scenario.insert("synthetic".into(), Value::Table(s));
            }
        }
        root.insert("scenario".into(), Value::Table(scenario));
        let mut risk = Table::new();
        risk.insert("eps_shortfall".into(), Value::Float(self.risk.eps_shortfall));
        risk.insert("eps_budget".into(), Value::Float(self.risk.eps_budget));
        risk.insert("eps_seller_loss".into(), Value::Float(self.risk.eps_seller_loss));
        root.insert("risk".into(), Value::Table(risk));
        let s = &self.solver;
        let mut solver = Table::new();
        let kind = match s.kind {
            SolverKind::Sca => "sca",
            SolverKind::Exact => "exact",
        };
        solver.insert("kind".into(), Value::String(kind.into()));
        solver.insert("samples".into(), Value::Integer(s.samples as i64));
        solver.insert("certify_samples".into(), Value::Integer(s.certify_samples as i64));
        solver.insert("max_outer".into(), Value::Integer(s.max_outer as i64));
        solver.insert("step_tol".into(), Value::Float(s.step_tol));
        solver.insert("inner_tol".into(), Value::Float(s.inner_tol));
        solver.insert("max_nodes".into(), Value::Integer(s.max_nodes as i64));
        solver.insert("max_sellers".into(), Value::Integer(s.max_sellers as i64));
        root.insert("solver".into(), Value::Table(solver));
        toml::to_string(&root).expect("config tables always serialize")
    }
}

/// Pulls typed fields out of tables, recording every problem instead of
/// stopping at the first.
struct Reader {
    errors: Vec<String>,
}

fn key_path(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl Reader {
    fn mismatch(&mut self, path: &str, key: &str, want: &str, got: &Value) {
        self.errors
            .push(format!("{}: expected {want}, found {}", key_path(path, key), got.type_str()));
    }

    fn float(&mut self, t: &mut Table, path: &str, key: &str) -> Option<f64> {
        match t.remove(key)? {
            Value::Float(x) => Some(x),
            Value::Integer(i) => Some(i as f64),
            other => {
                self.mismatch(path, key, "a number", &other);
                None
            }
        }
    }

    fn int(&mut self, t: &mut Table, path: &str, key: &str) -> Option<u64> {
        match t.remove(key)? {
            Value::Integer(i) if i >= 0 => Some(i as u64),
            Value::Integer(i) => {
                self.errors.push(format!("{}: must be >= 0, got {i}", key_path(path, key)));
                None
            }
            other => {
                self.mismatch(path, key, "an integer", &other);
                None
            }
        }
    }

    fn u32(&mut self, t: &mut Table, path: &str, key: &str) -> Option<u32> {
        let v = self.int(t, path, key)?;
        match u32::try_from(v) {
            Ok(x) => Some(x),
            Err(_) => {
                self.errors.push(format!("{}: {v} is too large", key_path(path, key)));
                None
            }
        }
    }

    fn string(&mut self, t: &mut Table, path: &str, key: &str) -> Option<String> {
        match t.remove(key)? {
            Value::String(s) => Some(s),
            other => {
                self.mismatch(path, key, "a string", &other);
                None
            }
        }
    }

    fn range(&mut self, t: &mut Table, path: &str, key: &str) -> Option<Range> {
        match t.remove(key)? {
            Value::Array(a) if a.len() == 2 => {
                let num = |v: &Value| match v {
                    Value::Float(x) => Some(*x),
                    Value::Integer(i) => Some(*i as f64),
                    _ => None,
                };
                match (num(&a[0]), num(&a[1])) {
                    (Some(lo), Some(hi)) => Some(Range::new(lo, hi)),
                    _ => {
                        self.errors.push(format!("{}: expected two numbers", key_path(path, key)));
                        None
                    }
                }
            }
            other => {
                self.mismatch(path, key, "a [lo, hi] pair", &other);
                None
            }
        }
    }

    fn table(&mut self, t: &mut Table, path: &str, key: &str) -> Option<Table> {
        match t.remove(key)? {
            Value::Table(x) => Some(x),
            other => {
                self.mismatch(path, key, "a table", &other);
                None
            }
        }
    }

    fn leftovers(&mut self, t: Table, path: &str) {
        for k in t.keys() {
            self.errors.push(format!("unknown key {}", key_path(path, k)));
        }
    }
}

fn read_synthetic(r: &mut Reader, mut t: Table, top_seed: Option<u64>) -> (SyntheticSpec, u64) {
    let p = "scenario.synthetic";
    let d = SyntheticSpec::default();
    let mut spec = SyntheticSpec {
        sellers: r.u32(&mut t, p, "sellers").unwrap_or(d.sellers),
        buyers: r.u32(&mut t, p, "buyers").unwrap_or(d.buyers),
        ..d
    };
    let seed = r.int(&mut t, p, "seed").or(top_seed).unwrap_or(0);
    for (k, slot) in [
        ("q_plus", &mut spec.q_plus),
        ("xi", &mut spec.xi),
        ("base_cost", &mut spec.base_cost),
        ("budget", &mut spec.budget),
        ("requirement", &mut spec.requirement),
        ("eps", &mut spec.eps),
        ("attendance", &mut spec.attendance),
    ] {
        if let Some(v) = r.range(&mut t, p, k) {
            *slot = v;
        }
    }
    if let Some(v) = r.float(&mut t, p, "buyer_attendance") {
        spec.buyer_attendance = v;
    }
    if let Some(v) = r.u32(&mut t, p, "capacity") {
        spec.capacity = v;
    }
    if let Some(mut w) = r.table(&mut t, p, "workload") {
        let wp = "scenario.synthetic.workload";
        let dw = TruncatedGaussianSpec::default();
        spec.workload = TruncatedGaussianSpec {
            mean: r.float(&mut w, wp, "mean").unwrap_or(dw.mean),
            std_dev: r.float(&mut w, wp, "std_dev").unwrap_or(dw.std_dev),
            lo: r.float(&mut w, wp, "lo").unwrap_or(dw.lo),
            hi: r.float(&mut w, wp, "hi").unwrap_or(dw.hi),
        };
        r.leftovers(w, wp);
    }
    r.leftovers(t, p);
    if let Err(e) = spec.validate() {
        r.errors.push(format!("scenario.synthetic: {e}"));
    }
    (spec, seed)
}

/// Parses config text; `base_dir` anchors a relative scenario file.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<CampaignConfig> {
    let mut root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Validation(vec![format!("malformed config: {}", e.message())]))?;
    let mut r = Reader { errors: Vec::new() };
    if !root.contains_key("seed") {
        r.errors.push("seed: required".to_string());
    }
    let seed = r.int(&mut root, "", "seed");
    let transactions = r.int(&mut root, "", "transactions").unwrap_or(300);
    if transactions < 1 {
        r.errors.push("transactions: must be >= 1".to_string());
    }
    let methods = match root.remove("methods") {
        None => MethodTag::ALL.to_vec(),
        Some(Value::Array(items)) => {
            let mut out = Vec::new();
            for v in items {
                match v.as_str().map(str::parse::<MethodTag>) {
                    Some(Ok(m)) if !out.contains(&m) => out.push(m),
                    Some(Ok(m)) => r.errors.push(format!("methods: {m} listed twice")),
                    _ => r.errors.push(format!("methods: unknown method {v}")),
                }
            }
            if out.is_empty() {
                r.errors.push("methods: must not be empty".to_string());
            }
            out
        }
        Some(other) => {
            r.mismatch("", "methods", "a list of method names", &other);
            Vec::new()
        }
    };
    let output_dir = base_dir.join(r.string(&mut root, "", "output_dir").unwrap_or_else(|| "results".into()));
    let output_dir = std::path::absolute(&output_dir).unwrap_or(output_dir);

    let scenario = match r.table(&mut root, "", "scenario") {
        None => {
            r.errors.push("scenario: required".to_string());
            None
        }
        Some(mut st) => {
            let file = r.string(&mut st, "scenario", "file");
            let synth = r.table(&mut st, "scenario", "synthetic");
            r.leftovers(st, "scenario");
            match (file, synth) {
                (Some(f), None) => {
                    let p = base_dir.join(f);
                    Some(ScenarioSource::File(std::path::absolute(&p).unwrap_or(p)))
                }
                (None, Some(t)) => {
                    let (spec, s) = read_synthetic(&mut r, t, seed);
                    Some(ScenarioSource::Synthetic { spec, seed: s })
                }
                (Some(_), Some(_)) => {
                    r.errors.push("scenario: give either file or synthetic, not both".to_string());
                    None
                }
                (None, None) => {
                    r.errors.push("scenario: needs file or synthetic".to_string());
                    None
                }
            }
        }
    };

    let mut risk = RiskBounds::default();
    if let Some(mut t) = r.table(&mut root, "", "risk") {
        if let Some(e) = r.float(&mut t, "risk", "eps") {
            risk = RiskBounds::uniform(e);
        }
        for (k, slot) in [
            ("eps_shortfall", &mut risk.eps_shortfall),
            ("eps_budget", &mut risk.eps_budget),
            ("eps_seller_loss", &mut risk.eps_seller_loss),
        ] {
            if let Some(v) = r.float(&mut t, "risk", k) {
                *slot = v;
            }
        }
        r.leftovers(t, "risk");
    }
    for (k, v) in [
        ("eps_shortfall", risk.eps_shortfall),
        ("eps_budget", risk.eps_budget),
        ("eps_seller_loss", risk.eps_seller_loss),
    ] {
        if !(0.0..=1.0).contains(&v) {
            r.errors.push(format!("risk.{k}: must lie in [0,1], got {v}"));
        }
    }

    let mut solver = SolverConfig::default();
    if let Some(mut t) = r.table(&mut root, "", "solver") {
        let p = "solver";
        if let Some(k) = r.string(&mut t, p, "kind") {
            match k.as_str() {
                "sca" => solver.kind = SolverKind::Sca,
                "exact" => solver.kind = SolverKind::Exact,
                _ => r.errors.push(format!("solver.kind: expected sca or exact, got {k:?}")),
            }
        }
        if let Some(v) = r.int(&mut t, p, "samples") {
            solver.samples = v;
        }
        if let Some(v) = r.int(&mut t, p, "certify_samples") {
            solver.certify_samples = v;
        }
        if let Some(v) = r.u32(&mut t, p, "max_outer") {
            solver.max_outer = v;
        }
        if let Some(v) = r.float(&mut t, p, "step_tol") {
            solver.step_tol = v;
        }
        if let Some(v) = r.float(&mut t, p, "inner_tol") {
            solver.inner_tol = v;
        }
        if let Some(v) = r.int(&mut t, p, "max_nodes") {
            solver.max_nodes = v;
        }
        if let Some(v) = r.u32(&mut t, p, "max_sellers") {
            solver.max_sellers = v;
        }
        r.leftovers(t, p);
    }
    if solver.samples < 1 {
        r.errors.push("solver.samples: must be >= 1".to_string());
    }
    if solver.max_outer < 1 {
        r.errors.push("solver.max_outer: must be >= 1".to_string());
    }
    if !(solver.step_tol > 0.0) {
        r.errors.push("solver.step_tol: must be > 0".to_string());
    }
    if !(solver.inner_tol > 0.0) {
        r.errors.push("solver.inner_tol: must be > 0".to_string());
    }
    if solver.max_nodes < 1 {
        r.errors.push("solver.max_nodes: must be >= 1".to_string());
    }
    r.leftovers(root, "");

    if !r.errors.is_empty() {
        return Err(Error::Validation(r.errors));
    }
    Ok(CampaignConfig {
        seed: seed.expect("checked above"),
        transactions,
        methods,
        output_dir,
        scenario: scenario.expect("checked above"),
        risk,
        solver,
    })
}

pub fn load_validate_config(path: &Path) -> Result<CampaignConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 7\n[scenario.synthetic]\nsellers = 4\nbuyers = 2\n";

    fn parse(s: &str) -> Result<CampaignConfig> {
        parse_config(s, Path::new("/tmp"))
    }

    fn offenses(s: &str) -> Vec<String> {
        match parse(s) {
            Err(Error::Validation(v)) => v,
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_resolves_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.transactions, 300);
        assert_eq!(c.risk, RiskBounds::uniform(0.35));
        assert_eq!(c.methods, MethodTag::ALL.to_vec());
        assert_eq!(c.solver, SolverConfig::default());
        match c.scenario {
            ScenarioSource::Synthetic { spec, seed } => {
                assert_eq!(seed, 7);
                assert_eq!((spec.sellers, spec.buyers), (4, 2));
                assert_eq!(spec.attendance, Range::new(0.5, 0.95));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "seed = 3\ntransactions = 12\nmethods = [\"IFAST\", \"mc_random\"]\n\
                    [scenario.synthetic]\nsellers = 5\nxi = [0.4, 0.4]\nworkload = { lo = 2.0 }\n\
                    [risk]\neps = 0.3\neps_budget = 0.2\n[solver]\nkind = \"exact\"\nstep_tol = 0.01\n";
        let a = parse(text).unwrap();
        let b = parse(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_toml(), a.to_toml());
        let f = parse("seed = 1\n[scenario]\nfile = \"sc.json\"\n").unwrap();
        assert_eq!(f.scenario, ScenarioSource::File(PathBuf::from("/tmp/sc.json")));
        assert_eq!(parse(&f.to_toml()).unwrap(), f);
    }

    #[test]
    fn misspelled_key_is_named() {
        let v = offenses("seed = 1\ntransaction = 5\n[scenario.synthetic]\nseller = 3\n");
        assert!(v.iter().any(|e| e == "unknown key transaction"), "{v:?}");
        assert!(v.iter().any(|e| e == "unknown key scenario.synthetic.seller"), "{v:?}");
    }

    #[test]
    fn every_offense_is_listed() {
        let v = offenses(
            "transactions = 0\nmethods = []\n[scenario.synthetic]\nbudget = [10, 8]\n[risk]\neps = \"high\"\n[solver]\nkind = \"magic\"\n",
        );
        for needle in ["seed: required", "transactions: must be >= 1", "methods: must not be empty", "budget", "risk.eps: expected a number", "solver.kind"] {
            assert!(v.iter().any(|e| e.contains(needle)), "{needle} missing from {v:?}");
        }
    }

    #[test]
    fn scenario_source_is_exclusive() {
        let v = offenses("seed = 1\n[scenario]\nfile = \"a.json\"\n[scenario.synthetic]\n");
        assert!(v.iter().any(|e| e.contains("not both")));
        let v = offenses("seed = 1\n");
        assert!(v.iter().any(|e| e == "scenario: required"));
    }

    #[test]
    fn load_reports_io_errors() {
        assert!(matches!(load_validate_config(Path::new("/nonexistent/x.toml")), Err(Error::Io { .. })));
    }
}
