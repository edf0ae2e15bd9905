//! Single-state Metropolis baseline: each `x_i` is updated in turn with an
//! autoregressive proposal around its Gaussian full conditional given the
//! neighbouring states, accepted on the observation ratio.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ehmm::{ar_step_with, Scratch};
use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetrize, Cholesky};
use crate::model::{LatentSequence, ModelSpec, ObservationSequence};
use crate::tally::Tally;

/// Gaussian full conditionals of `x_i` given `x_{i-1}` and `x_{i+1}` under
/// the latent prior, from generic conditioning (no inverse of `Φ` needed).
#[derive(Debug, Clone)]
pub struct ConditionalMoments {
    /// `μ_1 = first_next · x_2`.
    pub first_next: DMatrix<f64>,
    pub first_cov: DMatrix<f64>,
    /// `μ_i = interior_prev · x_{i-1} + interior_next · x_{i+1}`.
    pub interior_prev: DMatrix<f64>,
    pub interior_next: DMatrix<f64>,
    pub interior_cov: DMatrix<f64>,
    chol_first: Cholesky,
    chol_interior: Cholesky,
    chol_last: Cholesky,
    chol_only: Cholesky,
    phi: Vec<f64>,
}

impl ConditionalMoments {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let phi = spec.phi_matrix();
        let sigma_inv = spd_inverse(spec.sigma())?;
        let init_inv = spd_inverse(spec.sigma_init())?;
        let back = &phi * &sigma_inv * &phi;

        let first_cov = symmetrize(&spd_inverse(&(&init_inv + &back))?);
        let first_next = &first_cov * &phi * &sigma_inv;
        let interior_cov = symmetrize(&spd_inverse(&(&sigma_inv + &back))?);
        let interior_prev = &interior_cov * &sigma_inv * &phi;
        let interior_next = &interior_cov * &phi * &sigma_inv;

        let factor = |m: &DMatrix<f64>, what: &str| {
            Cholesky::new(m).map_err(|_| Error::Numerical(format!("{what} conditional covariance is not positive definite")))
        };
        Ok(Self {
            chol_first: factor(&first_cov, "time-1")?,
            chol_interior: factor(&interior_cov, "interior")?,
            chol_last: spec.chol_sigma().clone(),
            chol_only: spec.chol_init().clone(),
            first_next,
            first_cov,
            interior_prev,
            interior_next,
            interior_cov,
            phi: spec.phi().to_vec(),
        })
    }

    /// Conditional mean of `x_i` (written to `out`) and the matching factor.
    pub fn conditional(&self, x: &LatentSequence, i: usize, out: &mut [f64]) -> &Cholesky {
        let n = x.len();
        let p = out.len();
        let apply = |m: &DMatrix<f64>, v: &[f64], k: usize| (0..p).map(|c| m[(k, c)] * v[c]).sum::<f64>();
        if n == 1 {
            out.fill(0.0);
            &self.chol_only
        } else if i == 0 {
            let next = x.row(1);
            for (k, o) in out.iter_mut().enumerate() {
                *o = apply(&self.first_next, next, k);
            }
            &self.chol_first
        } else if i + 1 == n {
            let prev = x.row(i - 1);
            for (k, o) in out.iter_mut().enumerate() {
                *o = self.phi[k] * prev[k];
            }
            &self.chol_last
        } else {
            let (prev, next) = (x.row(i - 1), x.row(i + 1));
            for (k, o) in out.iter_mut().enumerate() {
                *o = apply(&self.interior_prev, prev, k) + apply(&self.interior_next, next, k);
            }
            &self.chol_interior
        }
    }
}

/// One pass over `i = 1..n`, each `x_i` updated jointly in all `P`
/// coordinates. Returns the number of accepted proposals.
pub fn metropolis_sweep<R: Rng + ?Sized>(
    x: &mut LatentSequence,
    spec: &ModelSpec,
    y: &ObservationSequence,
    moments: &ConditionalMoments,
    eps: f64,
    rng: &mut R,
    tally: &mut Tally,
) -> usize {
    let p = x.dim();
    let mut scratch = Scratch::new(p);
    let mut mean = vec![0.0; p];
    let mut state = vec![0.0; p];
    let mut accepted = 0;
    for i in 0..x.len() {
        let chol = moments.conditional(x, i, &mut mean);
        state.copy_from_slice(x.row(i));
        let obs = y.row(i);
        let mut ll = spec.log_obs_density(&state, obs);
        let mut evals = 1;
        let ok = ar_step_with(
            &mean,
            chol,
            &mut |v: &[f64]| {
                evals += 1;
                spec.log_obs_density(v, obs)
            },
            &mut state,
            &mut ll,
            eps,
            rng,
            &mut scratch,
        );
        tally.obs_evals += evals;
        tally.metropolis.record(i, ok);
        if ok {
            x.row_mut(i).copy_from_slice(&state);
            accepted += 1;
        }
    }
    accepted
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetropolisConfig {
    /// Sweeps per update.
    pub reps: usize,
    /// Scales used on alternate sweeps, small first.
    pub eps: (f64, f64),
}

impl MetropolisConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |e: f64| (0.0..=1.0).contains(&e);
        if !ok(self.eps.0) || !ok(self.eps.1) {
            return Err(Error::Config(format!("metropolis eps {:?} must lie in [0, 1]", self.eps)));
        }
        Ok(())
    }
}

/// Metropolis updater that keeps the sweep count so the proposal scale
/// alternates across updates as well as within one.
#[derive(Debug, Clone)]
pub struct MetropolisSampler {
    config: MetropolisConfig,
    moments: ConditionalMoments,
    sweeps: u64,
}

impl MetropolisSampler {
    pub fn new(spec: &ModelSpec, config: MetropolisConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, moments: ConditionalMoments::new(spec)?, sweeps: 0 })
    }

    pub fn moments(&self) -> &ConditionalMoments {
        &self.moments
    }

    pub fn update<R: Rng + ?Sized>(
        &mut self,
        x: &mut LatentSequence,
        spec: &ModelSpec,
        y: &ObservationSequence,
        rng: &mut R,
        tally: &mut Tally,
    ) -> Result<()> {
        spec.check_latent(x)?;
        spec.check_observations(y)?;
        for _ in 0..self.config.reps {
            let eps = if self.sweeps.is_multiple_of(2) { self.config.eps.0 } else { self.config.eps.1 };
            metropolis_sweep(x, spec, y, &self.moments, eps, rng, tally);
            self.sweeps += 1;
        }
        Ok(())
    }
}
