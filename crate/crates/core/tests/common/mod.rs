#![allow(dead_code)]

use seqpool::diagnostics::{act, ActOptions};
use seqpool::schedule::ChainOutput;

/// Pooled post-burn-in summary of one variable across runs.
#[derive(Debug, Clone, Copy)]
pub struct Summary {
    pub mean: f64,
    pub var: f64,
    /// Monte Carlo standard error of `mean`, from the autocorrelation time.
    pub se: f64,
    pub tau: f64,
}

/// `out[v][r]`: samples of variable `v = i * p + j` in run `r`.
pub fn per_variable(outputs: &[ChainOutput], p: usize) -> Vec<Vec<Vec<f64>>> {
    let vars = outputs[0].samples[0].2.values().len();
    debug_assert_eq!(vars % p, 0);
    (0..vars)
        .map(|v| outputs.iter().map(|o| o.samples.iter().map(|s| s.2.values()[v]).collect()).collect())
        .collect()
}

pub fn summarize(runs: &[Vec<f64>]) -> Summary {
    let opts = ActOptions::default();
    let refs: Vec<&[f64]> = runs.iter().map(Vec::as_slice).collect();
    let tau = act(&refs, &opts).map(|e| e.tau).unwrap_or(f64::NAN);
    let kept: Vec<&[f64]> = runs.iter().map(|r| &r[(r.len() as f64 * opts.burn_in_frac) as usize..]).collect();
    let count: usize = kept.iter().map(|k| k.len()).sum();
    let mean = kept.iter().flat_map(|k| k.iter()).sum::<f64>() / count as f64;
    let var = kept.iter().flat_map(|k| k.iter()).map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
    let se = (var * tau.max(1.0) / count as f64).sqrt();
    Summary { mean, var, se, tau }
}

pub fn sample_mean_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}
