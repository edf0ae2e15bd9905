//! Pool-state targets and the Metropolis moves that leave them invariant.
//!
//! At time `i` the pool chain samples pairs `(x, ℓ)` where `ℓ` links `x` to a
//! pool state at the adjacent time:
//!
//! ```text
//! forward   λ_i(x, ℓ) ∝ p(y_i | x) p(x | x_{i-1}^[ℓ])
//! backward  γ_i(x, ℓ) ∝ p(y_{i+1} | x_{i+1}^[ℓ]) p(x_{i+1}^[ℓ] | x)
//! ```
//!
//! Boundary times have no link: the forward scheme targets `p(x) p(y_1 | x)`
//! at time 1 and the backward scheme draws time-`n` pool states from
//! `p_n = N(0, Σ_init)`. Because of that draw, links into the time-`n` pool
//! weight `p(y_n | x_n^[ℓ]) / p_n(x_n^[ℓ])` in place of `p(y_n | x_n^[ℓ])`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Pool, ShiftProposal};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::model::ModelSpec;
use crate::rng::sample_log_categorical;
use crate::tally::Tally;

/// A pool state: latent value plus link into the adjacent pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    pub x: Vec<f64>,
    pub link: Option<usize>,
}

/// `x ↦ Φ⁻¹ x` and the factor of `Φ⁻¹ Σ Φ⁻¹`, which give the Gaussian
/// shape of `γ_i(·, ℓ)` in `x`.
#[derive(Debug, Clone)]
pub struct BackwardGeometry {
    inv_phi: Vec<f64>,
    chol: Cholesky,
}

impl BackwardGeometry {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        if spec.phi().contains(&0.0) {
            return Err(Error::Config(
                "backward pool scheme needs every phi_j != 0 (the link density is flat in x otherwise)".into(),
            ));
        }
        let inv_phi: Vec<f64> = spec.phi().iter().map(|f| 1.0 / f).collect();
        let p = spec.p();
        let cov = nalgebra::DMatrix::from_fn(p, p, |j, k| inv_phi[j] * spec.sigma()[(j, k)] * inv_phi[k]);
        Ok(Self { inv_phi, chol: Cholesky::new(&cov)? })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TargetKind<'a> {
    /// Forward scheme, time 1: `p(x) p(y_1 | x)`.
    Initial { y: &'a [f64] },
    /// Forward scheme, time `i > 1`: `λ_i` given the previous pool.
    Linked { y: &'a [f64], prev: &'a Pool },
    /// Backward scheme, time `n`: `N(0, Σ_init)`.
    Terminal,
    /// Backward scheme, time `i < n`: `γ_i` given the next pool.
    BackLinked { next: &'a Pool, geometry: &'a BackwardGeometry },
}

/// The density a pool chain leaves invariant at one time index.
#[derive(Debug, Clone, Copy)]
pub struct PoolTarget<'a> {
    pub spec: &'a ModelSpec,
    pub kind: TargetKind<'a>,
}

/// Reusable buffers for the moves.
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    mean: Vec<f64>,
    prop: Vec<f64>,
    z: Vec<f64>,
    noise: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new(p: usize) -> Self {
        Self { mean: vec![0.0; p], prop: vec![0.0; p], z: vec![0.0; p], noise: vec![0.0; p] }
    }
}

/// Autoregressive Metropolis update of `x` for a target `N(mean, LLᵀ) · exp(loglik)`.
///
/// Proposes `x' = mean + √(1-ε²)(x - mean) + ε L z` and accepts with
/// probability `min(1, exp(loglik(x') - loglik(x)))`. `current_ll` must hold
/// `loglik(x)` and is updated on acceptance.
pub fn ar_pool_step<R, F>(
    mean: &[f64],
    chol: &Cholesky,
    mut loglik: F,
    x: &mut [f64],
    current_ll: &mut f64,
    eps: f64,
    rng: &mut R,
) -> bool
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> f64,
{
    let mut scratch = Scratch::new(x.len());
    ar_step_with(mean, chol, &mut loglik, x, current_ll, eps, rng, &mut scratch)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn ar_step_with<R, F>(
    mean: &[f64],
    chol: &Cholesky,
    loglik: &mut F,
    x: &mut [f64],
    current_ll: &mut f64,
    eps: f64,
    rng: &mut R,
    scratch: &mut Scratch,
) -> bool
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> f64,
{
    if eps == 0.0 {
        return true;
    }
    let keep = (1.0 - eps * eps).max(0.0).sqrt();
    for z in scratch.z.iter_mut() {
        *z = rng.sample(StandardNormal);
    }
    chol.mul_vec(&scratch.z, &mut scratch.noise);
    for j in 0..x.len() {
        scratch.prop[j] = mean[j] + keep * (x[j] - mean[j]) + eps * scratch.noise[j];
    }
    let ll = loglik(&scratch.prop);
    if metropolis_accept(ll - *current_ll, rng) {
        x.copy_from_slice(&scratch.prop);
        *current_ll = ll;
        true
    } else {
        false
    }
}

pub(crate) fn metropolis_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    if log_ratio.is_nan() {
        return false;
    }
    rng.random::<f64>().ln() < log_ratio
}

/// Forward shift proposal `x + Φ(to - from)`, written to `out`.
pub fn shift_forward(phi: &[f64], x: &[f64], to: &[f64], from: &[f64], out: &mut [f64]) {
    for j in 0..x.len() {
        out[j] = x[j] + phi[j] * (to[j] - from[j]);
    }
}

/// Flips the low bit of a 0-based label: the mirror partner in a flip-paired pool.
pub fn mirror_index(link: usize) -> usize {
    link ^ 1
}

impl<'a> PoolTarget<'a> {
    pub fn new(spec: &'a ModelSpec, kind: TargetKind<'a>) -> Self {
        Self { spec, kind }
    }

    fn has_link(&self) -> bool {
        matches!(self.kind, TargetKind::Linked { .. } | TargetKind::BackLinked { .. })
    }

    fn adjacent_len(&self) -> usize {
        match self.kind {
            TargetKind::Linked { prev, .. } => prev.len(),
            TargetKind::BackLinked { next, .. } => next.len(),
            _ => 0,
        }
    }

    /// The x-dependent non-Gaussian factor: `log p(y_i | x)` for forward
    /// targets, zero for backward ones.
    pub fn loglik(&self, x: &[f64], tally: &mut Tally) -> f64 {
        match self.kind {
            TargetKind::Initial { y } | TargetKind::Linked { y, .. } => {
                tally.obs_evals += 1;
                self.spec.log_obs_density(x, y)
            }
            TargetKind::Terminal | TargetKind::BackLinked { .. } => 0.0,
        }
    }

    /// Unnormalized log target at `(x, link)`.
    pub fn log_density(&self, x: &[f64], link: Option<usize>, tally: &mut Tally) -> f64 {
        self.loglik(x, tally) + self.link_factor(x, link, tally)
    }

    /// The target divided by [`Self::loglik`]: the prior or link factor.
    fn link_factor(&self, x: &[f64], link: Option<usize>, tally: &mut Tally) -> f64 {
        let spec = self.spec;
        tally.trans_evals += 1;
        match self.kind {
            TargetKind::Initial { .. } | TargetKind::Terminal => spec.log_trans_density(None, x),
            TargetKind::Linked { prev, .. } => {
                let l = link.expect("linked target needs a link");
                spec.log_trans_density(Some(prev.state(l)), x)
            }
            TargetKind::BackLinked { next, .. } => {
                let l = link.expect("linked target needs a link");
                next.link_loglik(l) + spec.log_trans_density(Some(x), next.state(l))
            }
        }
    }

    /// Gaussian part of the target in `x` for a fixed link, written to `mean`.
    /// Returns the factor and whether the AR scale is forced to 1 (exact draws).
    fn gaussian_part(&self, link: Option<usize>, mean: &mut [f64]) -> (&'a Cholesky, bool) {
        match self.kind {
            TargetKind::Initial { .. } => {
                mean.fill(0.0);
                (self.spec.chol_init(), false)
            }
            TargetKind::Terminal => {
                mean.fill(0.0);
                (self.spec.chol_init(), true)
            }
            TargetKind::Linked { prev, .. } => {
                self.spec.trans_mean(prev.state(link.expect("link")), mean);
                (self.spec.chol_sigma(), false)
            }
            TargetKind::BackLinked { next, geometry } => {
                let xn = next.state(link.expect("link"));
                for j in 0..mean.len() {
                    mean[j] = geometry.inv_phi[j] * xn[j];
                }
                (&geometry.chol, false)
            }
        }
    }

    /// Stochastic link initialization: forward `P(ℓ) ∝ p(x | x_{i-1}^[ℓ])`,
    /// backward `P(ℓ) ∝ p(y_{i+1} | x_{i+1}^[ℓ]) p(x_{i+1}^[ℓ] | x)` (with the
    /// time-`n` weight adjustment).
    pub fn init_link<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        rng: &mut R,
        tally: &mut Tally,
    ) -> Result<Option<usize>> {
        let weights = match self.kind {
            TargetKind::Initial { .. } | TargetKind::Terminal => return Ok(None),
            TargetKind::Linked { prev, .. } => {
                tally.trans_evals += prev.len() as u64;
                (0..prev.len())
                    .map(|m| self.spec.log_trans_density(Some(prev.state(m)), x))
                    .collect::<Vec<_>>()
            }
            TargetKind::BackLinked { next, .. } => {
                tally.trans_evals += next.len() as u64;
                (0..next.len())
                    .map(|m| next.link_loglik(m) + self.spec.log_trans_density(Some(x), next.state(m)))
                    .collect::<Vec<_>>()
            }
        };
        sample_log_categorical(&weights, rng)
            .map(Some)
            .map_err(|e| Error::Numerical(format!("link initialization: {e}; log-weights = {weights:?}")))
    }

    /// Autoregressive update of `x` with the link held fixed.
    pub(crate) fn ar_step<R: Rng + ?Sized>(
        &self,
        state: &mut PoolState,
        ll: &mut f64,
        eps: f64,
        rng: &mut R,
        tally: &mut Tally,
        scratch: &mut Scratch,
    ) -> bool {
        let mut mean = std::mem::take(&mut scratch.mean);
        let (chol, exact) = self.gaussian_part(state.link, &mut mean);
        let eps = if exact { 1.0 } else { eps };
        let mut loglik = |v: &[f64]| self.loglik(v, tally);
        let accepted = ar_step_with(&mean, chol, &mut loglik, &mut state.x, ll, eps, rng, scratch);
        scratch.mean = mean;
        accepted
    }

    /// Joint `(x, ℓ)` move keeping the residual against the linked state fixed.
    ///
    /// Forward: `x' = x + Φ(x_{i-1}^[ℓ'] - x_{i-1}^[ℓ])`, accepted on `p(y_i|x')/p(y_i|x)`.
    /// Backward: `x' = x + Φ⁻¹(x_{i+1}^[ℓ'] - x_{i+1}^[ℓ])`, accepted on
    /// `p(y_{i+1}|x_{i+1}^[ℓ'])/p(y_{i+1}|x_{i+1}^[ℓ])`. Returns `None` at
    /// boundary times where there is no link.
    pub(crate) fn shift_step<R: Rng + ?Sized>(
        &self,
        state: &mut PoolState,
        ll: &mut f64,
        proposal: ShiftProposal,
        rng: &mut R,
        tally: &mut Tally,
        scratch: &mut Scratch,
    ) -> Option<bool> {
        let link = state.link?;
        let len = self.adjacent_len();
        let new_link = match proposal {
            ShiftProposal::Uniform => rng.random_range(0..len),
            ShiftProposal::Windowed(k) => {
                let step = rng.random_range(1..=k) as isize;
                let signed = if rng.random::<bool>() { step } else { -step };
                let target = link as isize + signed;
                if target < 0 || target >= len as isize {
                    return Some(false);
                }
                target as usize
            }
        };
        if new_link == link {
            return Some(true);
        }
        match self.kind {
            TargetKind::Linked { prev, .. } => {
                shift_forward(self.spec.phi(), &state.x, prev.state(new_link), prev.state(link), &mut scratch.prop);
                let new_ll = self.loglik(&scratch.prop, tally);
                if metropolis_accept(new_ll - *ll, rng) {
                    state.x.copy_from_slice(&scratch.prop);
                    state.link = Some(new_link);
                    *ll = new_ll;
                    Some(true)
                } else {
                    Some(false)
                }
            }
            TargetKind::BackLinked { next, geometry } => {
                let log_ratio = next.link_loglik(new_link) - next.link_loglik(link);
                if metropolis_accept(log_ratio, rng) {
                    let (a, b) = (next.state(new_link), next.state(link));
                    for j in 0..state.x.len() {
                        state.x[j] += geometry.inv_phi[j] * (a[j] - b[j]);
                    }
                    state.link = Some(new_link);
                    Some(true)
                } else {
                    Some(false)
                }
            }
            _ => None,
        }
    }

    /// Proposes `(-x, ℓ')` with `ℓ'` the mirror partner of `ℓ`, accepted by
    /// the full Metropolis ratio of the target. The ratio is exactly 1 when
    /// the observation density depends on `|x|` and the adjacent pool is
    /// mirror-paired.
    pub(crate) fn flip_step<R: Rng + ?Sized>(
        &self,
        state: &mut PoolState,
        ll: &mut f64,
        rng: &mut R,
        tally: &mut Tally,
        scratch: &mut Scratch,
    ) -> Result<bool> {
        let new_link = match state.link {
            Some(l) => {
                let m = mirror_index(l);
                if m >= self.adjacent_len() {
                    return Err(Error::Config(format!(
                        "flip needs an even pool size; link {l} has no mirror partner"
                    )));
                }
                Some(m)
            }
            None => None,
        };
        for j in 0..state.x.len() {
            scratch.prop[j] = -state.x[j];
        }
        let new_ll = self.loglik(&scratch.prop, tally);
        let before = *ll + self.link_factor(&state.x, state.link, tally);
        let after = new_ll + self.link_factor(&scratch.prop, new_link, tally);
        if metropolis_accept(after - before, rng) {
            state.x.copy_from_slice(&scratch.prop);
            state.link = new_link;
            *ll = new_ll;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Independence Metropolis move: time 1 proposes `x' ~ p(x)`; later
    /// times propose `ℓ'` uniformly and `x' ~ p(x | x_{i-1}^[ℓ'])`. Accepted
    /// on `p(y_i|x')/p(y_i|x)`. Only defined for forward targets.
    pub(crate) fn independence_step<R: Rng + ?Sized>(
        &self,
        state: &mut PoolState,
        ll: &mut f64,
        rng: &mut R,
        tally: &mut Tally,
        scratch: &mut Scratch,
    ) -> Result<bool> {
        let new_link = match self.kind {
            TargetKind::Initial { .. } => None,
            TargetKind::Linked { prev, .. } => Some(rng.random_range(0..prev.len())),
            _ => {
                return Err(Error::Config("independence pool moves need a forward scheme".into()));
            }
        };
        let mut mean = std::mem::take(&mut scratch.mean);
        let (chol, _) = self.gaussian_part(new_link, &mut mean);
        for z in scratch.z.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        chol.mul_vec(&scratch.z, &mut scratch.noise);
        for j in 0..mean.len() {
            scratch.prop[j] = mean[j] + scratch.noise[j];
        }
        scratch.mean = mean;
        let new_ll = self.loglik(&scratch.prop, tally);
        if metropolis_accept(new_ll - *ll, rng) {
            state.x.copy_from_slice(&scratch.prop);
            state.link = new_link;
            *ll = new_ll;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub(crate) fn has_shift(&self) -> bool {
        self.has_link()
    }
}
