//! Autocorrelation times from FFT autocovariances pooled over runs.
//!
//! For each variable the burn-in is dropped from every run, the mean is
//! taken over all runs together, the biased (`1/n`) autocovariances of the
//! runs are averaged, and `τ̂ = 1 + 2 Σ_{k=1}^{K} ρ̂_k` is summed up to a
//! cutoff lag `K`.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::tally::Tally;

/// Biased autocovariances `γ̂_k = (1/n) Σ_l (x_l - m)(x_{l+k} - m)` for
/// `k = 0..=max_lag`, by zero-padded FFT.
pub fn autocovariance_fft(series: &[f64], mean: f64, max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if n == 0 {
        return Err(Error::Config("autocovariance of an empty series".into()));
    }
    if max_lag >= n {
        return Err(Error::Config(format!("max lag {max_lag} needs a series longer than {n}")));
    }
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    buf.iter_mut().for_each(|c| *c = Complex::new(c.norm_sqr(), 0.0));
    planner.plan_fft_inverse(size).process(&mut buf);
    let scale = 1.0 / (size as f64 * n as f64);
    Ok(buf[..=max_lag].iter().map(|c| c.re * scale).collect())
}

/// Same estimator by direct `O(n · max_lag)` summation.
pub fn autocovariance_direct(series: &[f64], mean: f64, max_lag: usize) -> Vec<f64> {
    let n = series.len();
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|k| (0..n - k).map(|l| (series[l] - mean) * (series[l + k] - mean)).sum::<f64>() / n as f64)
        .collect()
}

/// How the autocorrelation sum is truncated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum CutoffRule {
    /// Smallest `K` with `ρ̂_K` below `threshold`, capped at a third of the
    /// run length.
    Threshold { threshold: f64 },
    /// Geyer's initial positive sequence of paired sums.
    Geyer,
}

impl Default for CutoffRule {
    fn default() -> Self {
        CutoffRule::Threshold { threshold: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActOptions {
    pub burn_in_frac: f64,
    pub cutoff: CutoffRule,
    /// Keep every `thin`-th post-burn-in sample; τ̂ is in thinned samples.
    pub thin: usize,
}

impl Default for ActOptions {
    fn default() -> Self {
        Self { burn_in_frac: 0.10, cutoff: CutoffRule::default(), thin: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActEstimate {
    pub tau: f64,
    /// Last lag included in the sum.
    pub cutoff_lag: usize,
    pub pooled_mean: f64,
    /// Averaged autocorrelations `ρ̂_0..ρ̂_cap`.
    #[serde(skip)]
    pub rho: Vec<f64>,
}

fn prepare(run: &[f64], opts: &ActOptions) -> Vec<f64> {
    let start = (run.len() as f64 * opts.burn_in_frac).floor() as usize;
    run[start.min(run.len())..].iter().step_by(opts.thin.max(1)).copied().collect()
}

/// Pooled autocorrelation time over several runs of one variable.
pub fn act(runs: &[&[f64]], opts: &ActOptions) -> Result<ActEstimate> {
    if runs.is_empty() {
        return Err(Error::Config("no runs to diagnose".into()));
    }
    if !(0.0..1.0).contains(&opts.burn_in_frac) {
        return Err(Error::Config(format!("burn-in fraction {} must lie in [0, 1)", opts.burn_in_frac)));
    }
    let kept: Vec<Vec<f64>> = runs.iter().map(|r| prepare(r, opts)).collect();
    let shortest = kept.iter().map(Vec::len).min().unwrap_or(0);
    if shortest < 2 {
        return Err(Error::Config("each run needs at least two samples after burn-in".into()));
    }
    let total: usize = kept.iter().map(Vec::len).sum();
    let pooled_mean = kept.iter().flatten().sum::<f64>() / total as f64;
    let cap = (shortest / 3).max(1).min(shortest - 1);

    let mut gamma = vec![0.0; cap + 1];
    for run in &kept {
        for (g, v) in gamma.iter_mut().zip(autocovariance_fft(run, pooled_mean, cap)?) {
            *g += v;
        }
    }
    gamma.iter_mut().for_each(|g| *g /= kept.len() as f64);
    if !(gamma[0] > 0.0) {
        return Err(Error::Numerical("autocorrelation time undefined: zero variance".into()));
    }
    let rho: Vec<f64> = gamma.iter().map(|g| g / gamma[0]).collect();

    let (tau, cutoff_lag) = match opts.cutoff {
        CutoffRule::Threshold { threshold } => {
            let k = (1..=cap).find(|&k| rho[k] < threshold).unwrap_or(cap);
            (1.0 + 2.0 * rho[1..=k].iter().sum::<f64>(), k)
        }
        CutoffRule::Geyer => {
            let mut sum = 0.0;
            let mut last = 0;
            let mut m = 0;
            while 2 * m < cap {
                let pair = rho[2 * m] + rho[2 * m + 1];
                if pair <= 0.0 {
                    break;
                }
                sum += pair;
                last = 2 * m + 1;
                m += 1;
            }
            ((2.0 * sum - 1.0).max(0.0), last)
        }
    };
    Ok(ActEstimate { tau, cutoff_lag, pooled_mean, rho })
}

/// Per-variable autocorrelation times with acceptance, cost and timing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub variables: Vec<String>,
    /// `τ̂` in (thinned) iterations; `None` when undefined.
    pub act: Vec<Option<f64>>,
    /// `τ̂ × secs_per_sample`.
    pub act_time_adjusted: Vec<Option<f64>>,
    pub cutoff_lag: Vec<Option<usize>>,
    pub pooled_mean: Vec<Option<f64>>,
    pub options: ActOptions,
    pub runs: usize,
    pub secs_per_sample: f64,
    /// Overall acceptance rate per update type that was used.
    pub acceptance: BTreeMap<String, f64>,
    pub cost: BTreeMap<String, u64>,
    /// Why `act` is missing for some variables.
    pub notes: Vec<String>,
}

impl DiagnosticsReport {
    /// `series[v][r]` is run `r` of variable `v`.
    pub fn build(
        variables: Vec<String>,
        series: &[Vec<Vec<f64>>],
        opts: &ActOptions,
        secs_per_sample: f64,
        tally: Option<&Tally>,
    ) -> Result<Self> {
        if variables.len() != series.len() {
            return Err(Error::Shape(format!("{} names for {} variables", variables.len(), series.len())));
        }
        let runs = series.first().map_or(0, Vec::len);
        if series.iter().any(|s| s.len() != runs) {
            return Err(Error::Shape("variables have different numbers of runs".into()));
        }
        let estimates: Vec<Result<ActEstimate>> = map_indexed(series.len(), |v| {
            let refs: Vec<&[f64]> = series[v].iter().map(Vec::as_slice).collect();
            act(&refs, opts)
        });
        let mut report = Self {
            act: Vec::with_capacity(series.len()),
            act_time_adjusted: Vec::with_capacity(series.len()),
            cutoff_lag: Vec::with_capacity(series.len()),
            pooled_mean: Vec::with_capacity(series.len()),
            options: *opts,
            runs,
            secs_per_sample,
            acceptance: BTreeMap::new(),
            cost: BTreeMap::new(),
            notes: Vec::new(),
            variables,
        };
        for (name, est) in report.variables.iter().zip(estimates) {
            match est {
                Ok(e) => {
                    report.act.push(Some(e.tau));
                    report.act_time_adjusted.push(Some(e.tau * secs_per_sample));
                    report.cutoff_lag.push(Some(e.cutoff_lag));
                    report.pooled_mean.push(Some(e.pooled_mean));
                }
                Err(Error::Config(m)) => return Err(Error::Config(m)),
                Err(e) => {
                    report.notes.push(format!("{name}: {e}"));
                    report.act.push(None);
                    report.act_time_adjusted.push(None);
                    report.cutoff_lag.push(None);
                    report.pooled_mean.push(None);
                }
            }
        }
        if let Some(t) = tally {
            let tables = [
                ("autoregressive", &t.autoregressive),
                ("shift", &t.shift),
                ("flip", &t.flip),
                ("independence", &t.independence),
                ("metropolis", &t.metropolis),
            ];
            for (name, table) in tables {
                if let Some(r) = table.total.rate() {
                    report.acceptance.insert(name.into(), r);
                }
            }
            report.cost.insert("transition_evals".into(), t.trans_evals);
            report.cost.insert("observation_evals".into(), t.obs_evals);
            report.cost.insert("density_evals".into(), t.density_evals());
        }
        Ok(report)
    }
}
