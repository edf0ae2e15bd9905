//! Embedded hidden Markov model samplers for state space models with a
//! Gaussian VAR(1) latent process and Poisson or Gaussian observations.
//!
//! Pool states are selected one time index at a time so that each update
//! costs `Θ(nL)` density evaluations. Particle Gibbs with backward
//! sampling and a single-state Metropolis sampler are provided as
//! baselines, alongside exact oracles (Kalman smoothing, grid HMM
//! posteriors) and autocorrelation-time diagnostics.

pub mod diagnostics;
pub mod ehmm;
pub mod error;
pub mod linalg;
pub mod metropolis;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod pgbs;
pub mod rng;
pub mod schedule;
pub mod tally;

pub use error::{Error, Result};
pub use model::{LatentSequence, ModelConfig, ModelSpec, ObsModel, ObservationSequence, Sequence};
pub use rng::{chain_rng, ChainRng};
pub use ehmm::{ehmm_update, independence_pool_update, Direction, EhmmConfig, ShiftProposal};
pub use metropolis::{ConditionalMoments, MetropolisConfig, MetropolisSampler};
pub use pgbs::pgbs_update;
pub use schedule::{run_chains, ChainRunner, Schedule, Start, UpdateSpec};
pub use tally::Tally;
