//! Hybrid forward/spot trading of crowdsensed data services.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN along with out-of-range values

pub mod benchmarks;
pub mod campaign;
pub mod error;
pub mod io;
pub mod market;
pub mod optimizer;
pub mod risk;
pub mod rng;
pub mod spot;

pub use benchmarks::MethodTag;
pub use campaign::{aggregate_metrics, replay_contracts, run_campaign, simulate_campaign, CampaignReport, MethodSummary, TimeStats};
pub use error::{Error, Result};
pub use market::*;
pub use optimizer::*;
pub use risk::*;
pub use spot::{execute_transaction, SpotConfig, TransactionOutcome};
