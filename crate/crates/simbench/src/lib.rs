//! Simulation harness: covariance models, seeded sampling, deletion
//! mechanisms, loss metrics, baseline methods and the scenario runner.

pub mod baselines;
pub mod config;
pub mod error;
pub mod metrics;
pub mod missingness;
pub mod models;
pub mod run;

pub use error::{Result, SimError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for one (run, purpose, index) slot of a seeded
/// experiment. Streams never depend on scheduling order.
pub fn stream_rng(seed: u64, run: usize, purpose: u64, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(run as u64).to_le_bytes());
    key[16..24].copy_from_slice(&purpose.to_le_bytes());
    key[24..].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
