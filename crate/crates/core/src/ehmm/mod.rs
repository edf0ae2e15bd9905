//! Embedded HMM updates with sequential pool-state selection.
//!
//! Pools are built one time index at a time, each conditioned on the pool
//! at the adjacent time, using Markov chains over `(x, ℓ)` pairs whose
//! marginal is the sequential pool density. With that choice the forward
//! (or backward) probabilities are constant, so a new sequence is drawn
//! by a single stochastic pass and an update costs `Θ(nL)` density
//! evaluations.

mod moves;
mod recursions;

pub use moves::{ar_pool_step, mirror_index, shift_forward, BackwardGeometry, PoolState, PoolTarget, TargetKind};
pub use recursions::{
    backward_pass, backward_pool_log_density, compute_alpha, compute_beta, forward_pass,
    forward_pool_log_density,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentSequence, ModelSpec, ObservationSequence, Sequence};
use crate::tally::Tally;
pub(crate) use moves::{ar_step_with, Scratch};

/// Which way an update runs through the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Forward pool scheme, stochastic backward pass.
    Forward,
    /// Forward scheme applied to the time-reversed sequence.
    Reversed,
    /// Backward pool scheme, stochastic forward pass.
    Backward,
}

/// How the shift move proposes a new link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftProposal {
    /// `ℓ'` uniform on all pool indices.
    #[default]
    Uniform,
    /// `ℓ' = ℓ + k` with `k` uniform on `{-K..-1, 1..K}`.
    Windowed(usize),
}

/// Transition kernel used to move along the pool chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolKernel {
    /// Autoregressive update then shift update (reversed: shift then
    /// autoregressive), with flips between mirror pairs when enabled.
    #[default]
    Local,
    /// Independence Metropolis proposals from the prior/transition density.
    Independence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EhmmConfig {
    pub pool_size: usize,
    /// Each autoregressive step draws its scale uniformly from this range.
    pub eps_range: (f64, f64),
    pub shift: ShiftProposal,
    pub flip: bool,
    pub kernel: PoolKernel,
}

impl EhmmConfig {
    pub fn new(pool_size: usize, eps_range: (f64, f64)) -> Self {
        Self { pool_size, eps_range, shift: ShiftProposal::Uniform, flip: false, kernel: PoolKernel::Local }
    }

    pub fn with_flip(mut self, flip: bool) -> Self {
        self.flip = flip;
        self
    }

    pub fn with_shift(mut self, shift: ShiftProposal) -> Self {
        self.shift = shift;
        self
    }

    pub fn independence(pool_size: usize) -> Self {
        Self { kernel: PoolKernel::Independence, ..Self::new(pool_size, (1.0, 1.0)) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        let (lo, hi) = self.eps_range;
        if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("eps range ({lo}, {hi}) must lie in [-1, 1] with lo <= hi")));
        }
        if self.flip && !self.pool_size.is_multiple_of(2) {
            return Err(Error::Config(format!("flip updates need an even pool size, got {}", self.pool_size)));
        }
        if let ShiftProposal::Windowed(0) = self.shift {
            return Err(Error::Config("shift window must be at least 1".into()));
        }
        if self.flip && self.kernel == PoolKernel::Independence {
            return Err(Error::Config("flip updates are not combined with independence pools".into()));
        }
        Ok(())
    }

    fn draw_eps<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.eps_range;
        if lo < hi {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    }
}

/// The `L` pool states at one time index.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    p: usize,
    xs: Vec<f64>,
    links: Vec<Option<usize>>,
    obs_ll: Vec<f64>,
    /// Weight a backward-scheme link into this pool carries: `obs_ll`,
    /// minus `log p_n(x)` for the time-`n` pool.
    link_ll: Vec<f64>,
}

impl Pool {
    #[cfg(test)]
    pub(crate) fn from_parts(p: usize, xs: Vec<f64>, links: Vec<Option<usize>>, obs_ll: Vec<f64>) -> Self {
        debug_assert_eq!(xs.len(), p * links.len());
        let link_ll = obs_ll.clone();
        Self { p, xs, links, obs_ll, link_ll }
    }

    /// A pool of given states with `log p(y | x)` evaluated for each.
    pub fn from_states(spec: &ModelSpec, y: &[f64], states: &[Vec<f64>]) -> Self {
        let p = spec.p();
        let mut xs = Vec::with_capacity(states.len() * p);
        for s in states {
            xs.extend_from_slice(s);
        }
        let obs_ll: Vec<f64> = states.iter().map(|s| spec.log_obs_density(s, y)).collect();
        let link_ll = obs_ll.clone();
        Self { p, xs, links: vec![None; states.len()], obs_ll, link_ll }
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.xs[k * self.p..(k + 1) * self.p]
    }

    pub fn link(&self, k: usize) -> Option<usize> {
        self.links[k]
    }

    /// `log p(y_i | x_i^[k])` at this pool's own time.
    pub fn obs_loglik(&self, k: usize) -> f64 {
        self.obs_ll[k]
    }

    pub(crate) fn link_loglik(&self, k: usize) -> f64 {
        self.link_ll[k]
    }
}

/// Which side pools are conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolSet {
    pub pools: Vec<Pool>,
    /// Position of the current `x_i` in pool `i`.
    pub current: Vec<usize>,
    pub scheme: Scheme,
    pub flip: bool,
}

impl PoolSet {
    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }
}

/// Runs the pool chain from the current state in both directions.
///
/// The current state is placed at a uniformly chosen position `l`;
/// positions above `l` come from forward transitions and positions below
/// from their reversals. Transition `j → j+1` is a flip when flips are
/// enabled and `j` is even, otherwise the configured kernel.
#[allow(clippy::too_many_arguments)]
pub fn generate_pool<R: Rng + ?Sized>(
    target: &PoolTarget<'_>,
    current: &PoolState,
    y_own: &[f64],
    config: &EhmmConfig,
    time: usize,
    rng: &mut R,
    tally: &mut Tally,
) -> Result<(Pool, usize)> {
    let size = config.pool_size;
    let p = current.x.len();
    let spec = target.spec;
    let mut scratch = Scratch::new(p);
    let place = rng.random_range(0..size);

    let mut xs = vec![0.0; size * p];
    let mut links = vec![None; size];
    let mut lls = vec![0.0; size];
    let start_ll = target.loglik(&current.x, tally);

    let mut store = |k: usize, s: &PoolState, ll: f64| {
        xs[k * p..(k + 1) * p].copy_from_slice(&s.x);
        links[k] = s.link;
        lls[k] = ll;
    };
    store(place, current, start_ll);

    let flip_at = |j: usize| config.flip && j.is_multiple_of(2);

    let mut walker = current.clone();
    let mut ll = start_ll;
    for k in place + 1..size {
        if flip_at(k - 1) {
            let ok = target.flip_step(&mut walker, &mut ll, rng, tally, &mut scratch)?;
            tally.flip.record(time, ok);
        } else {
            step(target, config, &mut walker, &mut ll, false, time, rng, tally, &mut scratch)?;
        }
        store(k, &walker, ll);
    }

    let mut walker = current.clone();
    let mut ll = start_ll;
    for k in (0..place).rev() {
        if flip_at(k) {
            let ok = target.flip_step(&mut walker, &mut ll, rng, tally, &mut scratch)?;
            tally.flip.record(time, ok);
        } else {
            step(target, config, &mut walker, &mut ll, true, time, rng, tally, &mut scratch)?;
        }
        store(k, &walker, ll);
    }

    let obs_ll: Vec<f64> = match target.kind {
        TargetKind::Initial { .. } | TargetKind::Linked { .. } => lls,
        TargetKind::Terminal | TargetKind::BackLinked { .. } => {
            tally.obs_evals += size as u64;
            (0..size).map(|k| spec.log_obs_density(&xs[k * p..(k + 1) * p], y_own)).collect()
        }
    };
    let link_ll = match target.kind {
        TargetKind::Terminal => {
            // the time-n pool is drawn from p_n, so links into it are
            // importance-weighted by p(y_n | x) / p_n(x)
            tally.trans_evals += size as u64;
            (0..size)
                .map(|k| obs_ll[k] - spec.log_trans_density(None, &xs[k * p..(k + 1) * p]))
                .collect()
        }
        _ => obs_ll.clone(),
    };
    Ok((Pool { p, xs, links, obs_ll, link_ll }, place))
}

/// One non-flip transition of the pool chain, or its reversal.
#[allow(clippy::too_many_arguments)]
fn step<R: Rng + ?Sized>(
    target: &PoolTarget<'_>,
    config: &EhmmConfig,
    walker: &mut PoolState,
    ll: &mut f64,
    reverse: bool,
    time: usize,
    rng: &mut R,
    tally: &mut Tally,
    scratch: &mut Scratch,
) -> Result<()> {
    match config.kernel {
        PoolKernel::Independence => {
            let ok = target.independence_step(walker, ll, rng, tally, scratch)?;
            tally.independence.record(time, ok);
        }
        PoolKernel::Local => {
            let shift = target.has_shift();
            if reverse && shift {
                shift_once(target, config, walker, ll, time, rng, tally, scratch);
            }
            let eps = config.draw_eps(rng);
            let ok = target.ar_step(walker, ll, eps, rng, tally, scratch);
            tally.autoregressive.record(time, ok);
            if !reverse && shift {
                shift_once(target, config, walker, ll, time, rng, tally, scratch);
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn shift_once<R: Rng + ?Sized>(
    target: &PoolTarget<'_>,
    config: &EhmmConfig,
    walker: &mut PoolState,
    ll: &mut f64,
    time: usize,
    rng: &mut R,
    tally: &mut Tally,
    scratch: &mut Scratch,
) {
    if let Some(ok) = target.shift_step(walker, ll, config.shift, rng, tally, scratch) {
        tally.shift.record(time, ok);
    }
}

fn check_inputs(x: &LatentSequence, spec: &ModelSpec, y: &ObservationSequence, config: &EhmmConfig) -> Result<()> {
    config.validate()?;
    spec.check_latent(x)?;
    spec.check_observations(y)
}

/// Builds all pools for one update, forward (`P_1`, then `P_i | P_{i-1}`)
/// or backward (`P_n`, then `P_i | P_{i+1}`).
pub fn build_pools<R: Rng + ?Sized>(
    x: &LatentSequence,
    spec: &ModelSpec,
    y: &ObservationSequence,
    config: &EhmmConfig,
    scheme: Scheme,
    rng: &mut R,
    tally: &mut Tally,
) -> Result<PoolSet> {
    check_inputs(x, spec, y, config)?;
    let n = x.len();
    let mut pools: Vec<Pool> = Vec::with_capacity(n);
    let mut current = Vec::with_capacity(n);
    match scheme {
        Scheme::Forward => {
            for i in 0..n {
                let kind = match pools.last() {
                    None => TargetKind::Initial { y: y.row(0) },
                    Some(prev) => TargetKind::Linked { y: y.row(i), prev },
                };
                let target = PoolTarget::new(spec, kind);
                let link = target.init_link(x.row(i), rng, tally)?;
                let start = PoolState { x: x.row(i).to_vec(), link };
                let (pool, place) = generate_pool(&target, &start, y.row(i), config, i, rng, tally)?;
                pools.push(pool);
                current.push(place);
            }
        }
        Scheme::Backward => {
            let geometry = BackwardGeometry::new(spec)?;
            for i in (0..n).rev() {
                let kind = match pools.last() {
                    None => TargetKind::Terminal,
                    Some(next) => TargetKind::BackLinked { next, geometry: &geometry },
                };
                let target = PoolTarget::new(spec, kind);
                let link = target.init_link(x.row(i), rng, tally)?;
                let start = PoolState { x: x.row(i).to_vec(), link };
                let (pool, place) = generate_pool(&target, &start, y.row(i), config, i, rng, tally)?;
                pools.push(pool);
                current.push(place);
            }
            pools.reverse();
            current.reverse();
        }
    }
    Ok(PoolSet { pools, current, scheme, flip: config.flip })
}

/// One embedded HMM update of the whole sequence.
pub fn ehmm_update<R: Rng + ?Sized>(
    x: &LatentSequence,
    spec: &ModelSpec,
    y: &ObservationSequence,
    config: &EhmmConfig,
    direction: Direction,
    rng: &mut R,
    tally: &mut Tally,
) -> Result<LatentSequence> {
    match direction {
        Direction::Forward => {
            let pools = build_pools(x, spec, y, config, Scheme::Forward, rng, tally)?;
            backward_pass(&pools, spec, None, rng, tally)
        }
        Direction::Reversed => {
            if !spec.is_time_reversible() {
                return Err(Error::Config(
                    "reversed-sequence updates need a time-reversible latent process (equal phi_j or rho = 0)".into(),
                ));
            }
            let mut local = Tally::default();
            let out = ehmm_update(&x.reversed(), spec, &y.reversed(), config, Direction::Forward, rng, &mut local)?;
            tally.merge_reversed(&local, x.len());
            Ok(out.reversed())
        }
        Direction::Backward => {
            if config.kernel == PoolKernel::Independence {
                return Err(Error::Config("independence pools use the forward scheme".into()));
            }
            let pools = build_pools(x, spec, y, config, Scheme::Backward, rng, tally)?;
            let last = &pools.pools[pools.len() - 1];
            let terminal: Vec<f64> = (0..last.len()).map(|k| last.obs_ll[k] - last.link_ll[k]).collect();
            forward_pass(&pools, spec, None, Some(&terminal), rng, tally)
        }
    }
}

/// Embedded HMM update whose pools come from independence Metropolis
/// proposals, the analogue of particle Gibbs with the transition density as
/// importance density.
pub fn independence_pool_update<R: Rng + ?Sized>(
    x: &LatentSequence,
    spec: &ModelSpec,
    y: &ObservationSequence,
    pool_size: usize,
    direction: Direction,
    rng: &mut R,
    tally: &mut Tally,
) -> Result<LatentSequence> {
    ehmm_update(x, spec, y, &EhmmConfig::independence(pool_size), direction, rng, tally)
}

/// Collects `pools[i].state(choice[i])` into a sequence.
pub(crate) fn gather(pools: &PoolSet, choice: &[usize]) -> LatentSequence {
    let p = pools.pools[0].p;
    let mut values = Vec::with_capacity(choice.len() * p);
    for (pool, &k) in pools.pools.iter().zip(choice) {
        values.extend_from_slice(pool.state(k));
    }
    Sequence::new(choice.len(), p, values).expect("pool shapes are consistent")
}

#[cfg(test)]
mod tests;
