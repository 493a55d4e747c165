//! Deterministic random streams.
//!
//! Every consumer of randomness owns a stream derived from
//! `(seed, purpose, index)`. Streams are never shared between workers, so a
//! computation gives the same answer regardless of how work is split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type RandomStream = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never collide even when the
/// seed and index are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Per-transaction market realizations in a campaign.
    Transaction,
    /// Common-random-number sample paths used during risk estimation.
    RiskSample,
    /// Independent sample paths used to certify a solution.
    Certify,
    /// Synthetic scenario generation.
    Synthetic,
    /// Taxi-trace ingestion (quality draws).
    Ingest,
    /// MCRandom baseline choices.
    McRandom,
    /// Synthetic trip-trace generation.
    Trace,
}

impl Purpose {
    fn tag(self) -> &'static [u8] {
        match self {
            Purpose::Transaction => b"transaction",
            Purpose::RiskSample => b"risk-sample",
            Purpose::Certify => b"certify",
            Purpose::Synthetic => b"synthetic",
            Purpose::Ingest => b"ingest",
            Purpose::McRandom => b"mc-random",
            Purpose::Trace => b"trace",
        }
    }
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> RandomStream {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.tag());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Uniform value in `[0, 1)` computed from a hash of the inputs. Used where a
/// stable per-item jitter is needed without threading a stream through.
pub fn hash_unit(seed: u64, parts: &[&[u8]]) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
}
