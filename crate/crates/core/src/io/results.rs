//! Campaign artifacts on disk.
//!
//! | file | content | deterministic |
//! |---|---|---|
//! | `events.csv` | one row per (method, transaction) | yes |
//! | `buyer_events.csv` | one row per (method, transaction, buyer) | yes |
//! | `seller_events.csv` | one row per (method, transaction, seller) | yes |
//! | `summary.json` | quality, utility and risk aggregates | yes |
//! | `plot_quality.csv` | mean quality per method | yes |
//! | `resolved_config.toml`, `scenario.json` | inputs as run | yes |
//! | `forward_contracts.json`, `forward_trace.csv` | forward solve | yes |
//! | `timings.csv` | decision time per (method, transaction) | no |
//! | `timing_summary.json` | decision-time statistics, forward solve time | no |
//! | `manifest.json` | every file above with its sha256 | yes |
//!
//! Wall-clock files are listed in the manifest as volatile, without a
//! digest, so the manifest itself is byte-identical across reruns.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmarks::MethodTag;
use crate::error::{Error, Result};
use crate::market::{BuyerId, SellerId};

/// One row of `events.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub method: MethodTag,
    pub transaction: u64,
    pub realization: String,
    pub quality: f64,
    pub payment: f64,
    pub buyer_utility: f64,
    pub seller_utility: f64,
    pub present_buyers: u32,
    pub present_sellers: u32,
    pub idle_sellers: u32,
    pub forward_services: u32,
    pub spot_services: u32,
    pub volunteers: u32,
    pub shortfall_buyers: u32,
    pub ledger_balanced: bool,
    pub warnings: u32,
}

/// One row of `buyer_events.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuyerEvent {
    pub method: MethodTag,
    pub transaction: u64,
    pub buyer: BuyerId,
    pub present: bool,
    pub quality: f64,
    pub forward_quality: f64,
    pub forward_payment: f64,
    pub spot_payment: f64,
    pub shortfall: bool,
    pub forward_shortfall: bool,
    pub over_budget: bool,
}

/// One row of `seller_events.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SellerEvent {
    pub method: MethodTag,
    pub transaction: u64,
    pub seller: SellerId,
    pub present: bool,
    pub tasks: u32,
    pub income: f64,
    pub cost: f64,
    pub utility: f64,
    pub loss: bool,
}

/// One row of `timings.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub method: MethodTag,
    pub transaction: u64,
    pub decision_time_s: f64,
}

/// Everything the aggregate report is computed from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CampaignLogs {
    pub events: Vec<EventRecord>,
    pub buyers: Vec<BuyerEvent>,
    pub sellers: Vec<SellerEvent>,
    pub timings: Vec<TimingRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: Option<String>,
    pub volatile: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
    /// sha256 over the `name:digest` lines of every non-volatile file.
    pub deterministic_digest: String,
}

impl Manifest {
    pub fn digests(&self) -> Vec<(&str, Option<&str>)> {
        self.files.iter().map(|f| (f.file.as_str(), f.sha256.as_deref())).collect()
    }
}

/// A file to write, with its bytes and whether it depends on wall-clock time.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: Vec<u8>,
    pub volatile: bool,
}

impl Artifact {
    pub fn stable(name: &str, contents: impl Into<Vec<u8>>) -> Self {
        Artifact {
            name: name.to_string(),
            contents: contents.into(),
            volatile: false,
        }
    }

    pub fn volatile(name: &str, contents: impl Into<Vec<u8>>) -> Self {
        Artifact {
            name: name.to_string(),
            contents: contents.into(),
            volatile: true,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Aggregation(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Aggregation(e.to_string()))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::format(path, e))
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report types serialize");
    v.push(b'\n');
    v
}

/// Log tables; empty when there were no outcomes.
pub fn log_artifacts(logs: &CampaignLogs) -> Result<Vec<Artifact>> {
    if logs.events.is_empty() {
        return Ok(Vec::new());
    }
    Ok(vec![
        Artifact::stable("events.csv", csv_bytes(&logs.events)?),
        Artifact::stable("buyer_events.csv", csv_bytes(&logs.buyers)?),
        Artifact::stable("seller_events.csv", csv_bytes(&logs.sellers)?),
        Artifact::volatile("timings.csv", csv_bytes(&logs.timings)?),
    ])
}

/// Writes `artifacts` plus `manifest.json` into `dir`.
pub fn write_results(dir: &Path, artifacts: &[Artifact]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut lines = String::new();
    let mut sorted: Vec<&Artifact> = artifacts.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for a in sorted {
        let path = dir.join(&a.name);
        fs::write(&path, &a.contents).map_err(|e| Error::io(&path, e))?;
        let sha = (!a.volatile).then(|| sha256_hex(&a.contents));
        if let Some(s) = &sha {
            lines.push_str(&format!("{}:{}\n", a.name, s));
        }
        files.push(ManifestEntry {
            file: a.name.clone(),
            bytes: if a.volatile { 0 } else { a.contents.len() as u64 },
            sha256: sha,
            volatile: a.volatile,
        });
    }
    let manifest = Manifest {
        files,
        deterministic_digest: sha256_hex(lines.as_bytes()),
    };
    let path: PathBuf = dir.join("manifest.json");
    fs::write(&path, json_bytes(&manifest)).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads the log tables written by [`log_artifacts`].
pub fn read_logs(dir: &Path) -> Result<CampaignLogs> {
    if !dir.join("events.csv").exists() {
        return Ok(CampaignLogs::default());
    }
    Ok(CampaignLogs {
        events: read_csv(&dir.join("events.csv"))?,
        buyers: read_csv(&dir.join("buyer_events.csv"))?,
        sellers: read_csv(&dir.join("seller_events.csv"))?,
        timings: read_csv(&dir.join("timings.csv"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(t: u64) -> EventRecord {
        EventRecord {
            method: MethodTag::QualityPrefer,
            transaction: t,
            realization: "00ff".into(),
            quality: 0.1 + t as f64 / 3.0,
            payment: 1.0,
            buyer_utility: 0.5,
            seller_utility: -0.25,
            present_buyers: 2,
            present_sellers: 3,
            idle_sellers: 1,
            forward_services: 0,
            spot_services: 2,
            volunteers: 0,
            shortfall_buyers: 1,
            ledger_balanced: true,
            warnings: 0,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let logs = CampaignLogs {
            events: (0..5).map(event).collect(),
            buyers: vec![BuyerEvent {
                method: MethodTag::Ifast,
                transaction: 0,
                buyer: BuyerId(3),
                present: true,
                quality: std::f64::consts::PI,
                forward_quality: 1e-17,
                forward_payment: 2.0,
                spot_payment: 0.0,
                shortfall: false,
                forward_shortfall: true,
                over_budget: false,
            }],
            sellers: vec![],
            timings: vec![TimingRecord {
                method: MethodTag::Ifast,
                transaction: 0,
                decision_time_s: 1.5e-6,
            }],
        };
        write_results(dir.path(), &log_artifacts(&logs).unwrap()).unwrap();
        assert_eq!(read_logs(dir.path()).unwrap(), logs);
        let header = fs::read_to_string(dir.path().join("events.csv")).unwrap();
        assert!(header.starts_with("method,transaction,realization,quality,"));
    }

    #[test]
    fn manifest_skips_volatile_digests() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m1 = write_results(a.path(), &[Artifact::stable("x.txt", "same"), Artifact::volatile("t.csv", "1")]).unwrap();
        let m2 = write_results(b.path(), &[Artifact::stable("x.txt", "same"), Artifact::volatile("t.csv", "2")]).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(
            fs::read(a.path().join("manifest.json")).unwrap(),
            fs::read(b.path().join("manifest.json")).unwrap()
        );
        assert_eq!(m1.files[1].sha256.as_deref(), Some(sha256_hex(b"same").as_str()));
        let m3 = write_results(b.path(), &[Artifact::stable("x.txt", "other")]).unwrap();
        assert_ne!(m1.deterministic_digest, m3.deterministic_digest);
    }

    #[test]
    fn empty_logs_write_no_event_files() {
        let dir = tempfile::tempdir().unwrap();
        let arts = log_artifacts(&CampaignLogs::default()).unwrap();
        assert!(arts.is_empty());
        write_results(dir.path(), &arts).unwrap();
        assert!(!dir.path().join("events.csv").exists());
        assert_eq!(read_logs(dir.path()).unwrap(), CampaignLogs::default());
    }

    #[test]
    fn unwritable_directory_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        match write_results(&blocker.join("sub"), &[]) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("sub")),
            other => panic!("{other:?}"),
        }
    }
}
