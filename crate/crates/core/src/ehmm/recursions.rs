//! Forward/backward probabilities over a pool set and the stochastic passes
//! that draw a sequence from them.
//!
//! Everything is in log space and each time slice is shifted so its maximum
//! is zero; only relative values within a slice matter. Passing `None` for
//! the α or β table selects the constant-probability fast path used by the
//! sequential schemes, which never forms an `L × L` sum.

use rand::Rng;

use super::{gather, PoolSet};
use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::model::{LatentSequence, ModelSpec};
use crate::rng::sample_log_categorical;
use crate::tally::Tally;

fn normalize(slice: &mut [f64]) {
    let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_finite() {
        slice.iter_mut().for_each(|v| *v -= max);
    }
}

/// `log κ^f_i(x)` up to a per-time constant for every pool state:
/// `p(x) p(y_1|x)` at time 1, `p(y_i|x) Σ_ℓ p(x | x_{i-1}^[ℓ])` after.
pub fn forward_pool_log_density(pools: &PoolSet, spec: &ModelSpec) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(pools.len());
    for (i, pool) in pools.pools.iter().enumerate() {
        let row = (0..pool.len())
            .map(|k| {
                let x = pool.state(k);
                let prior = if i == 0 {
                    spec.log_trans_density(None, x)
                } else {
                    let prev = &pools.pools[i - 1];
                    let t: Vec<f64> =
                        (0..prev.len()).map(|m| spec.log_trans_density(Some(prev.state(m)), x)).collect();
                    log_sum_exp(&t)
                };
                pool.obs_loglik(k) + prior
            })
            .collect();
        out.push(row);
    }
    out
}

/// `log κ^b_i(x)` up to a per-time constant: `Σ_ℓ w_{i+1}(x_{i+1}^[ℓ]) p(x_{i+1}^[ℓ] | x)`
/// for `i < n`, and `p_n(x) = N(x; 0, Σ_init)` at time `n`. The link weight
/// `w_i` is `p(y_i | x)` except `w_n = p(y_n | x) / p_n(x)`.
pub fn backward_pool_log_density(pools: &PoolSet, spec: &ModelSpec) -> Vec<Vec<f64>> {
    let n = pools.len();
    let terminal: Vec<f64> = {
        let last = &pools.pools[n - 1];
        (0..last.len()).map(|k| spec.log_trans_density(None, last.state(k))).collect()
    };
    let mut out = Vec::with_capacity(n);
    for (i, pool) in pools.pools.iter().enumerate() {
        let row = (0..pool.len())
            .map(|k| {
                let x = pool.state(k);
                if i + 1 == n {
                    terminal[k]
                } else {
                    let next = &pools.pools[i + 1];
                    let t: Vec<f64> = (0..next.len())
                        .map(|m| {
                            let w = if i + 2 == n { next.obs_loglik(m) - terminal[m] } else { next.obs_loglik(m) };
                            w + spec.log_trans_density(Some(x), next.state(m))
                        })
                        .collect();
                    log_sum_exp(&t)
                }
            })
            .collect();
        out.push(row);
    }
    out
}

/// Forward probabilities for arbitrary pool densities `log_kappa`:
///
/// ```text
/// α_1(x) = p(x) p(y_1|x) / κ_1(x)
/// α_i(x) = p(y_i|x) / κ_i(x) · Σ_ℓ p(x | x_{i-1}^[ℓ]) α_{i-1}(x_{i-1}^[ℓ])
/// ```
pub fn compute_alpha(pools: &PoolSet, spec: &ModelSpec, log_kappa: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(pools.len());
    for (i, pool) in pools.pools.iter().enumerate() {
        let mut row: Vec<f64> = (0..pool.len())
            .map(|k| {
                let x = pool.state(k);
                let carry = if i == 0 {
                    spec.log_trans_density(None, x)
                } else {
                    let prev = &pools.pools[i - 1];
                    let t: Vec<f64> = (0..prev.len())
                        .map(|m| spec.log_trans_density(Some(prev.state(m)), x) + alpha[i - 1][m])
                        .collect();
                    log_sum_exp(&t)
                };
                pool.obs_loglik(k) - log_kappa[i][k] + carry
            })
            .collect();
        normalize(&mut row);
        alpha.push(row);
    }
    alpha
}

/// Backward probabilities, `β_n = 1` and
/// `β_i(x) = 1/κ_i(x) · Σ_ℓ w_{i+1}(x_{i+1}^[ℓ]) p(x_{i+1}^[ℓ] | x) β_{i+1}(x_{i+1}^[ℓ])`.
///
/// The link weight `w_i` is `p(y_i | x)`, except that the time-`n` pool
/// density is folded into it: `w_n = p(y_n | x) / κ_n(x)`. [`forward_pass`]
/// takes the same factor as `terminal_log_kappa`.
pub fn compute_beta(pools: &PoolSet, spec: &ModelSpec, log_kappa: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = pools.len();
    let mut beta = vec![Vec::new(); n];
    beta[n - 1] = vec![0.0; pools.pools[n - 1].len()];
    for i in (0..n - 1).rev() {
        let (pool, next) = (&pools.pools[i], &pools.pools[i + 1]);
        let mut row: Vec<f64> = (0..pool.len())
            .map(|k| {
                let x = pool.state(k);
                let t: Vec<f64> = (0..next.len())
                    .map(|m| {
                        let w = if i + 2 == n { next.obs_loglik(m) - log_kappa[n - 1][m] } else { next.obs_loglik(m) };
                        w + spec.log_trans_density(Some(x), next.state(m)) + beta[i + 1][m]
                    })
                    .collect();
                log_sum_exp(&t) - log_kappa[i][k]
            })
            .collect();
        normalize(&mut row);
        beta[i] = row;
    }
    beta
}

fn draw<R: Rng + ?Sized>(weights: &[f64], time: usize, rng: &mut R) -> Result<usize> {
    sample_log_categorical(weights, rng).map_err(|e| Error::Numerical(format!("time {}: {e}", time + 1)))
}

/// Stochastic backward pass: `x_n' ∝ α_n`, then `x_{i-1}' ∝ α_{i-1}(x) p(x_i' | x)`.
/// With `log_alpha = None` the α are taken as constant.
pub fn backward_pass<R: Rng + ?Sized>(
    pools: &PoolSet,
    spec: &ModelSpec,
    log_alpha: Option<&[Vec<f64>]>,
    rng: &mut R,
    tally: &mut Tally,
) -> Result<LatentSequence> {
    let n = pools.len();
    let mut choice = vec![0; n];
    let last = &pools.pools[n - 1];
    choice[n - 1] = match log_alpha {
        Some(a) => draw(&a[n - 1], n - 1, rng)?,
        None => rng.random_range(0..last.len()),
    };
    let mut weights = Vec::new();
    for i in (1..n).rev() {
        let (pool, next) = (&pools.pools[i - 1], pools.pools[i].state(choice[i]));
        weights.clear();
        tally.trans_evals += pool.len() as u64;
        for m in 0..pool.len() {
            let a = log_alpha.map_or(0.0, |a| a[i - 1][m]);
            weights.push(a + spec.log_trans_density(Some(pool.state(m)), next));
        }
        choice[i - 1] = draw(&weights, i - 1, rng)?;
    }
    Ok(gather(pools, &choice))
}

/// Stochastic forward pass: `x_1' ∝ β_1(x) p(x) p(y_1|x)`, then
/// `x_i' ∝ β_i(x) p(x | x_{i-1}') p(y_i|x)`.
///
/// `terminal_log_kappa`, when given, divides the time-`n` weights by the
/// time-`n` pool density, matching the link weight used in [`compute_beta`].
/// The backward scheme always passes `p_n`: its time-`n` pool is drawn from
/// `p_n` and the selected sequence is only `∝ p(x, y) / Π κ_i(x_i)` with
/// that factor present.
pub fn forward_pass<R: Rng + ?Sized>(
    pools: &PoolSet,
    spec: &ModelSpec,
    log_beta: Option<&[Vec<f64>]>,
    terminal_log_kappa: Option<&[f64]>,
    rng: &mut R,
    tally: &mut Tally,
) -> Result<LatentSequence> {
    let n = pools.len();
    let mut choice = vec![0; n];
    let mut weights = Vec::new();
    for i in 0..n {
        let pool = &pools.pools[i];
        weights.clear();
        tally.trans_evals += pool.len() as u64;
        for k in 0..pool.len() {
            let x = pool.state(k);
            let prior = if i == 0 {
                spec.log_trans_density(None, x)
            } else {
                spec.log_trans_density(Some(pools.pools[i - 1].state(choice[i - 1])), x)
            };
            let mut w = prior + pool.obs_loglik(k) + log_beta.map_or(0.0, |b| b[i][k]);
            if i + 1 == n {
                if let Some(kappa) = terminal_log_kappa {
                    w -= kappa[k];
                }
            }
            weights.push(w);
        }
        choice[i] = draw(&weights, i, rng)?;
    }
    Ok(gather(pools, &choice))
}
