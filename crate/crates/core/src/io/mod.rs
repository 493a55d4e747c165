//! Scenario sources, configuration and on-disk artifacts.

pub mod config;
pub mod results;
pub mod synthetic;
pub mod taxi;

pub use config::{load_validate_config, parse_config, CampaignConfig, ScenarioSource, SolverConfig};
pub use results::{read_logs, write_results, Artifact, CampaignLogs, Manifest, ManifestEntry};
pub use synthetic::{generate_synthetic, BuyerSpec, Range, SyntheticSpec};
pub use taxi::{ingest_taxi_trace, read_trips, DateWindow, IngestionConfig, Ingested, TripRecord};
