//! Seed-derived random streams.
//!
//! Every chain gets its own ChaCha20 stream: the generator is keyed with
//! `seed_from_u64(master_seed)` and then switched to stream number
//! `chain_index`. Streams never overlap, so runs are reproducible per
//! `(master_seed, chain_index)` regardless of how chains are scheduled
//! across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

pub type ChainRng = ChaCha20Rng;

pub fn chain_rng(master_seed: u64, chain_index: u64) -> ChainRng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(chain_index);
    rng
}

/// Draws an index with probability proportional to `exp(log_weights)`.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Result<usize> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || log_weights.iter().any(|w| w.is_nan()) {
        return Err(Error::Numerical(format!(
            "cannot normalize {} log-weights (max = {max})",
            log_weights.len()
        )));
    }
    if log_weights.len() == 1 {
        return Ok(0);
    }
    let total: f64 = log_weights.iter().map(|w| (w - max).exp()).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (k, w) in log_weights.iter().enumerate() {
        let e = (w - max).exp();
        if e > 0.0 {
            last = k;
            if u < e {
                return Ok(k);
            }
            u -= e;
        }
    }
    Ok(last)
}
