//! `ifast`: forward optimization, campaign replay, benchmarking, trace
//! ingestion and risk reporting.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid input, 3 infeasible,
//! 4 resource guard hit.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ifast_core::campaign::{aggregate_metrics, replay_contracts, run_campaign, TimingSummary};
use ifast_core::io::results::{json_bytes, log_artifacts, write_results, Artifact};
use ifast_core::io::synthetic::BuyerSpec;
use ifast_core::io::taxi::{ingest_taxi_trace, read_trips, DateWindow, IngestionConfig};
use ifast_core::io::load_validate_config;
use ifast_core::{
    build_problem_with, compute_risks_exact, estimate_risks_mc, solve_exact_ie, solve_sca, ContractSet, Error,
    ExactGuards, ProblemOptions, Scenario, ScaParams, SolveResult,
};

#[derive(Parser)]
#[command(name = "ifast", version, about = "Hybrid forward/spot data-service market simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Solver {
    Sca,
    Exact,
}

#[derive(Clone, Copy, ValueEnum)]
enum RiskBackend {
    Mc,
    Exact,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the forward contract problem for a scenario.
    Optimize {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "sca")]
        solver: Solver,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Sample-path size used during search.
        #[arg(long)]
        samples: Option<u64>,
    },
    /// Replay fixed contracts over seeded transactions.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        contracts: PathBuf,
        #[arg(long, default_value_t = 300)]
        transactions: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full campaign (all configured methods) from a config file.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build a scenario from a taxi trip trace.
    Ingest {
        #[arg(long)]
        trips: PathBuf,
        #[arg(long, default_value_t = 77)]
        poi: u32,
        /// Inclusive date window `YYYY-MM-DD..YYYY-MM-DD`.
        #[arg(long)]
        window: Option<DateWindow>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        sellers: u32,
        #[arg(long, default_value_t = 10)]
        buyers: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report shortfall, over-budget and seller-loss probabilities.
    Risk {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        contracts: PathBuf,
        #[arg(long, value_enum, default_value = "mc")]
        backend: RiskBackend,
        #[arg(long, default_value_t = 10_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Workload quadrature points for the exact backend.
        #[arg(long, default_value_t = 16)]
        grid: usize,
    },
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Validation(_) | Error::Structural(_) | Error::Parameter(_) | Error::Format { .. } => 2,
            Error::Infeasible(_) => 3,
            Error::Resource { .. } => 4,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure {
            code: 1,
            message: format!("{}: {e}", dir.display()),
        })?;
    }
    fs::write(path, bytes).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })
}

fn invalid(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let sc: Scenario = serde_json::from_str(&read(path)?).map_err(|e| invalid(path, e))?;
    sc.validate()?;
    Ok(sc)
}

/// Accepts a bare contract set or a solver result that carries one.
fn load_contracts(path: &Path) -> Result<ContractSet, Failure> {
    let text = read(path)?;
    if let Ok(cs) = serde_json::from_str::<ContractSet>(&text) {
        return Ok(cs);
    }
    serde_json::from_str::<SolveResult>(&text)
        .map(|r| r.contracts)
        .map_err(|e| invalid(path, e))
}

fn optimize(scenario: &Path, solver: Solver, seed: u64, out: &Path, samples: Option<u64>) -> Result<(), Failure> {
    let sc = load_scenario(scenario)?;
    let defaults = ProblemOptions::default();
    let options = ProblemOptions {
        samples: samples.unwrap_or(defaults.samples),
        seed,
        ..defaults
    };
    let problem = build_problem_with(&sc, options)?;
    let result = match solver {
        Solver::Sca => solve_sca(&problem, ScaParams::default()),
        Solver::Exact => solve_exact_ie(&problem, ExactGuards::default()),
    };
    let result = match result {
        Err(Error::Resource { message, incumbent: Some(best) }) => {
            write(out, &json_bytes(&*best))?;
            return Err(Failure {
                code: 4,
                message: format!("resource guard hit: {message}; incumbent written to {}", out.display()),
            });
        }
        other => other?,
    };
    write(out, &json_bytes(&result))?;
    println!(
        "{} contracts, expected quality {:.4}, feasible {}",
        result.contracts.len(),
        result.objective,
        result.feasible
    );
    if result.feasible {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!(
                "no contract set meets the risk bounds (max violation {:.4}); best effort written to {}",
                result.risk_report.max_violation(&sc.risk_bounds),
                out.display()
            ),
        })
    }
}

fn simulate(scenario: &Path, contracts: &Path, transactions: u64, seed: u64, out: &Path) -> Result<(), Failure> {
    let sc = load_scenario(scenario)?;
    let cs = load_contracts(contracts)?;
    let logs = replay_contracts(&sc, &cs, seed, transactions)?;
    let (methods, decision) = aggregate_metrics(&logs)?;
    let timing = TimingSummary {
        forward_solve_s: None,
        decision_time_s: decision,
    };
    let mut artifacts = log_artifacts(&logs)?;
    artifacts.push(Artifact::stable("summary.json", json_bytes(&methods)));
    artifacts.push(Artifact::volatile("timing_summary.json", json_bytes(&timing)));
    let manifest = write_results(out, &artifacts)?;
    for m in &methods {
        println!(
            "{} transactions, mean quality {:.4}, seller idle rate {:.4}",
            m.transactions, m.mean_quality, m.seller_idle_rate
        );
    }
    println!("manifest digest {}", manifest.deterministic_digest);
    Ok(())
}

fn benchmark(config: &Path) -> Result<(), Failure> {
    let cfg = load_validate_config(config)?;
    let (run, manifest) = run_campaign(&cfg)?;
    for d in &run.report.summary.diagnostics {
        eprintln!("{d}");
    }
    println!("{:<16}{:>14}{:>14}{:>14}", "method", "quality", "median s", "p95 s");
    for m in &run.report.summary.methods {
        let t = run.report.timing.decision_time_s.get(&m.method);
        println!(
            "{:<16}{:>14.4}{:>14.3e}{:>14.3e}",
            m.method.as_str(),
            m.mean_quality,
            t.map_or(f64::NAN, |t| t.median),
            t.map_or(f64::NAN, |t| t.p95)
        );
    }
    if let Some(s) = run.report.timing.forward_solve_s {
        println!("forward solve {s:.3e} s");
    }
    println!("results in {}", cfg.output_dir.display());
    println!("manifest digest {}", manifest.deterministic_digest);
    Ok(())
}

fn ingest(
    trips: &Path,
    poi: u32,
    window: Option<DateWindow>,
    out: &Path,
    sellers: u32,
    buyers: u32,
    seed: u64,
) -> Result<(), Failure> {
    let file = fs::File::open(trips).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", trips.display()),
    })?;
    let cfg = IngestionConfig {
        poi_area: poi,
        window,
        sellers,
        seed,
        ..IngestionConfig::default()
    };
    let spec = BuyerSpec {
        buyers,
        ..BuyerSpec::default()
    };
    let ingested = ingest_taxi_trace(read_trips(file), &cfg, &spec)?;
    write(out, &json_bytes(&ingested.scenario))?;
    let r = &ingested.report;
    println!(
        "{} rows ({} malformed), window {}, {} vehicles seen, {} kept",
        r.rows,
        r.malformed,
        r.window,
        r.vehicles_seen,
        r.kept.len()
    );
    Ok(())
}

fn risk(
    scenario: &Path,
    contracts: &Path,
    backend: RiskBackend,
    samples: u64,
    seed: u64,
    grid: usize,
) -> Result<(), Failure> {
    let sc = load_scenario(scenario)?;
    let cs = load_contracts(contracts)?;
    let report = match backend {
        RiskBackend::Mc => estimate_risks_mc(&sc, &cs, samples, seed)?,
        RiskBackend::Exact => compute_risks_exact(&sc, &cs, grid)?,
    };
    print!("{}", String::from_utf8_lossy(&json_bytes(&report)));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Optimize {
            scenario,
            solver,
            seed,
            out,
            samples,
        } => optimize(&scenario, solver, seed, &out, samples),
        Command::Simulate {
            scenario,
            contracts,
            transactions,
            seed,
            out,
        } => simulate(&scenario, &contracts, transactions, seed, &out),
        Command::Benchmark { config } => benchmark(&config),
        Command::Ingest {
            trips,
            poi,
            window,
            out,
            sellers,
            buyers,
            seed,
        } => ingest(&trips, poi, window, &out, sellers, buyers, seed),
        Command::Risk {
            scenario,
            contracts,
            backend,
            samples,
            seed,
            grid,
        } => risk(&scenario, &contracts, backend, samples, seed, grid),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
