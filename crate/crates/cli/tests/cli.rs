use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ifast_core::io::taxi::{generate_trace, write_trips, TraceSpec};
use ifast_core::{
    BuyerId, BuyerProfile, EconomicParams, RiskBounds, Scenario, SellerId, SellerProfile, SolveResult,
    StructuralLimits, TruncatedGaussianSpec,
};

fn ifast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifast")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// One buyer (requirement 7.5, budget 9), two sellers with q⁺ 4.2 and 4.0.
fn instance_a(attendance: f64) -> Scenario {
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

fn write_json(dir: &Path, name: &str, sc: &Scenario) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec(sc).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn optimize_then_risk_then_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_json(dir.path(), "a.json", &instance_a(1.0));
    let out = dir.path().join("solution.json");
    for solver in ["exact", "sca"] {
        let o = ifast(&["optimize", "--scenario", s(&sc), "--solver", solver, "--seed", "3", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let r: SolveResult = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
        assert_eq!(r.contracts.len(), 2);
        assert!((r.objective - 8.2).abs() < 1e-9);
        assert!(r.feasible);
    }

    let o = ifast(&["risk", "--scenario", s(&sc), "--contracts", s(&out), "--backend", "exact"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["shortfall"]["1"], 0.0);
    let o = ifast(&["risk", "--scenario", s(&sc), "--contracts", s(&out), "--backend", "mc", "--samples", "500"]);
    assert_eq!(code(&o), 0);

    let sim = dir.path().join("sim");
    let o = ifast(&[
        "simulate", "--scenario", s(&sc), "--contracts", s(&out), "--transactions", "5", "--seed", "1", "--out", s(&sim),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let events = fs::read_to_string(sim.join("events.csv")).unwrap();
    assert_eq!(events.lines().count(), 6);
    assert!(sim.join("manifest.json").exists());
    assert!(stdout(&o).contains("mean quality 8.2000"));
}

#[test]
fn infeasible_forward_problem_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_json(dir.path(), "half.json", &instance_a(0.5));
    let out = dir.path().join("solution.json");
    let o = ifast(&["optimize", "--scenario", s(&sc), "--solver", "exact", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    // the best-effort result is still written
    let r: SolveResult = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert!(!r.feasible);
}

#[test]
fn invalid_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = instance_a(1.0);
    bad.sellers[0].attendance_prob = 1.5;
    bad.buyers[0].budget = -1.0;
    let sc = write_json(dir.path(), "bad.json", &bad);
    let o = ifast(&["optimize", "--scenario", s(&sc), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("attendance") && err.contains("budget"), "{err}");

    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, "{not json").unwrap();
    let o = ifast(&["optimize", "--scenario", s(&garbage), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_contract_participant_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_json(dir.path(), "a.json", &instance_a(1.0));
    let cs = dir.path().join("cs.json");
    fs::write(
        &cs,
        r#"{"contracts":[{"seller_id":9,"buyer_id":1,"level":"plus","price":1.0,"penalty":0.0}]}"#,
    )
    .unwrap();
    let o = ifast(&["risk", "--scenario", s(&sc), "--contracts", s(&cs)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("campaign.toml");
    fs::write(
        &cfg,
        r#"
seed = 11
transactions = 8
output_dir = "out"

[scenario.synthetic]
sellers = 6
buyers = 2

[solver]
samples = 400
certify_samples = 1000
"#,
    )
    .unwrap();
    cfg
}

#[test]
fn benchmark_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = ifast(&["benchmark", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(dir.path().join("out/manifest.json")).unwrap();
    let table = stdout(&o);
    for m in ["IFAST", "SPOT_DATAD", "IMPROVE_IE", "QUALITY_PREFER", "MC_RANDOM"] {
        assert!(table.contains(m) || String::from_utf8_lossy(&o.stderr).contains(m), "{m} missing");
    }
    let o = ifast(&["benchmark", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(dir.path().join("out/manifest.json")).unwrap(), first);
}

#[test]
fn misspelled_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seed = 1\ntransactons = 5\n[scenario.synthetic]\n").unwrap();
    let o = ifast(&["benchmark", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("transactons"));
}

#[test]
fn ingest_builds_a_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let trips = dir.path().join("trips.csv");
    let spec = TraceSpec {
        vehicles: 30,
        ..TraceSpec::default()
    };
    write_trips(fs::File::create(&trips).unwrap(), &generate_trace(&spec)).unwrap();
    let out = dir.path().join("scenario.json");
    let o = ifast(&[
        "ingest", "--trips", s(&trips), "--poi", "77", "--window", "2024-01-01..2024-01-31", "--out", s(&out),
        "--sellers", "5", "--buyers", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sc: Scenario = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    sc.validate().unwrap();
    assert_eq!((sc.sellers.len(), sc.buyers.len()), (5, 2));

    let o = ifast(&["ingest", "--trips", s(&trips), "--window", "2024-02-30..x", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_file_exits_1() {
    let o = ifast(&["benchmark", "--config", "/nonexistent/c.toml"]);
    assert_eq!(code(&o), 1);
}
