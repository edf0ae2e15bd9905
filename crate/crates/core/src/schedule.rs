//! Update schedules as data, and a runner that applies one to a chain.
//!
//! A schedule is an ordered list of updates applied once per iteration.
//! Updates marked `record` emit a sample after they run. Schedule files are
//! TOML:
//!
//! ```toml
//! [[update]]
//! type = "ehmm"
//! direction = "forward"      # forward | reversed | backward
//! pool_size = 50
//! eps_range = [0.1, 0.4]
//! flip = false
//! record = true
//!
//! [[update]]
//! type = "pgbs"
//! direction = "reversed"
//! particles = 250
//!
//! [[update]]
//! type = "metropolis"
//! reps = 10
//! eps = [0.2, 0.8]
//!
//! [[update]]
//! type = "independence_pool"
//! pool_size = 100
//! ```

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ehmm::{ehmm_update, independence_pool_update, Direction, EhmmConfig, ShiftProposal};
use crate::error::{Error, Result};
use crate::metropolis::{MetropolisConfig, MetropolisSampler};
use crate::model::{LatentSequence, ModelSpec, ObservationSequence};
use crate::parallel::map_indexed;
use crate::pgbs::pgbs_update;
use crate::rng::{chain_rng, ChainRng};
use crate::tally::Tally;

fn yes() -> bool {
    true
}

fn forward() -> Direction {
    Direction::Forward
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum UpdateSpec {
    Ehmm {
        #[serde(default = "forward")]
        direction: Direction,
        pool_size: usize,
        eps_range: (f64, f64),
        #[serde(default)]
        flip: bool,
        #[serde(default)]
        shift: ShiftProposal,
        #[serde(default = "yes")]
        record: bool,
    },
    Pgbs {
        #[serde(default = "forward")]
        direction: Direction,
        particles: usize,
        #[serde(default = "yes")]
        record: bool,
    },
    Metropolis {
        reps: usize,
        eps: (f64, f64),
        #[serde(default = "yes")]
        record: bool,
    },
    IndependencePool {
        #[serde(default = "forward")]
        direction: Direction,
        pool_size: usize,
        #[serde(default = "yes")]
        record: bool,
    },
}

impl UpdateSpec {
    pub fn records(&self) -> bool {
        match self {
            UpdateSpec::Ehmm { record, .. }
            | UpdateSpec::Pgbs { record, .. }
            | UpdateSpec::Metropolis { record, .. }
            | UpdateSpec::IndependencePool { record, .. } => *record,
        }
    }

    pub fn label(&self) -> String {
        let dir = |d: &Direction| format!("{d:?}").to_lowercase();
        match self {
            UpdateSpec::Ehmm { direction, pool_size, flip, .. } => {
                format!("ehmm-{}-L{pool_size}{}", dir(direction), if *flip { "-flip" } else { "" })
            }
            UpdateSpec::Pgbs { direction, particles, .. } => format!("pgbs-{}-L{particles}", dir(direction)),
            UpdateSpec::Metropolis { reps, .. } => format!("metropolis-x{reps}"),
            UpdateSpec::IndependencePool { direction, pool_size, .. } => {
                format!("independence-{}-L{pool_size}", dir(direction))
            }
        }
    }

    fn ehmm_config(&self) -> Option<EhmmConfig> {
        match self {
            UpdateSpec::Ehmm { pool_size, eps_range, flip, shift, .. } => {
                Some(EhmmConfig::new(*pool_size, *eps_range).with_flip(*flip).with_shift(*shift))
            }
            _ => None,
        }
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let reversible = |d: &Direction| {
            if *d == Direction::Reversed && !spec.is_time_reversible() {
                Err(Error::Config("reversed-sequence updates need equal phi_j or rho = 0".into()))
            } else {
                Ok(())
            }
        };
        match self {
            UpdateSpec::Ehmm { direction, .. } => {
                self.ehmm_config().expect("ehmm").validate()?;
                reversible(direction)?;
                if *direction == Direction::Backward && spec.phi().contains(&0.0) {
                    return Err(Error::Config("backward pool scheme needs every phi_j non-zero".into()));
                }
                Ok(())
            }
            UpdateSpec::Pgbs { direction, particles, .. } => {
                if *particles == 0 {
                    return Err(Error::Config("pgbs needs at least one particle".into()));
                }
                if *direction == Direction::Backward {
                    return Err(Error::Config("pgbs direction must be forward or reversed".into()));
                }
                reversible(direction)
            }
            UpdateSpec::Metropolis { eps, .. } => MetropolisConfig { reps: 1, eps: *eps }.validate(),
            UpdateSpec::IndependencePool { direction, pool_size, .. } => {
                if *pool_size == 0 {
                    return Err(Error::Config("independence pools need at least one state".into()));
                }
                if *direction == Direction::Backward {
                    return Err(Error::Config("independence pools run forward or reversed".into()));
                }
                reversible(direction)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(rename = "update")]
    pub updates: Vec<UpdateSpec>,
}

impl Schedule {
    pub fn new(updates: Vec<UpdateSpec>) -> Self {
        Self { updates }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("schedule: {e}")))
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.updates.is_empty() {
            return Err(Error::Config("schedule has no updates".into()));
        }
        self.updates.iter().try_for_each(|u| u.validate(spec))
    }
}

/// Where a chain starts.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Start {
    /// A draw from the latent prior using the chain's own stream.
    #[default]
    Prior,
    Given(LatentSequence),
}

enum Stage {
    Plain(UpdateSpec),
    Metropolis(Box<MetropolisSampler>, bool),
}

/// One chain: its state, random stream and accounting.
pub struct ChainRunner<'a> {
    spec: &'a ModelSpec,
    y: &'a ObservationSequence,
    stages: Vec<Stage>,
    labels: Vec<String>,
    x: LatentSequence,
    rng: ChainRng,
    tally: Tally,
}

/// One recorded sample and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Record<'s> {
    pub iteration: usize,
    pub element: usize,
    pub x: &'s LatentSequence,
}

impl<'a> ChainRunner<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        y: &'a ObservationSequence,
        schedule: &Schedule,
        start: Start,
        mut rng: ChainRng,
    ) -> Result<Self> {
        schedule.validate(spec)?;
        spec.check_observations(y)?;
        let x = match start {
            Start::Prior => spec.sample_prior(&mut rng),
            Start::Given(x) => {
                spec.check_latent(&x)?;
                x
            }
        };
        let stages = schedule
            .updates
            .iter()
            .map(|u| match u {
                UpdateSpec::Metropolis { reps, eps, record } => {
                    let sampler = MetropolisSampler::new(spec, MetropolisConfig { reps: *reps, eps: *eps })?;
                    Ok(Stage::Metropolis(Box::new(sampler), *record))
                }
                other => Ok(Stage::Plain(other.clone())),
            })
            .collect::<Result<_>>()?;
        let labels = schedule.updates.iter().map(UpdateSpec::label).collect();
        Ok(Self { spec, y, stages, labels, x, rng, tally: Tally::default() })
    }

    pub fn state(&self) -> &LatentSequence {
        &self.x
    }

    pub fn tally(&self) -> &Tally {
        &self.tally
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    fn apply(&mut self, k: usize) -> Result<bool> {
        let (spec, y) = (self.spec, self.y);
        let rng = &mut self.rng;
        let tally = &mut self.tally;
        match &mut self.stages[k] {
            Stage::Metropolis(sampler, record) => {
                sampler.update(&mut self.x, spec, y, rng, tally)?;
                Ok(*record)
            }
            Stage::Plain(u) => {
                let u = &*u;
                self.x = match u {
                    UpdateSpec::Ehmm { direction, .. } => {
                        let config = u.ehmm_config().expect("ehmm");
                        ehmm_update(&self.x, spec, y, &config, *direction, rng, tally)?
                    }
                    UpdateSpec::Pgbs { direction, particles, .. } => {
                        pgbs_update(&self.x, spec, y, *particles, *direction, rng, tally)?
                    }
                    UpdateSpec::IndependencePool { direction, pool_size, .. } => {
                        independence_pool_update(&self.x, spec, y, *pool_size, *direction, rng, tally)?
                    }
                    UpdateSpec::Metropolis { .. } => unreachable!("built as a sampler stage"),
                };
                Ok(u.records())
            }
        }
    }

    /// Runs the schedule once.
    pub fn step<F: FnMut(Record<'_>)>(&mut self, iteration: usize, mut sink: F) -> Result<()> {
        for k in 0..self.stages.len() {
            if self.apply(k)? {
                sink(Record { iteration, element: k, x: &self.x });
            }
        }
        Ok(())
    }

    /// Runs `iters` iterations, passing recorded samples from every
    /// `thin`-th iteration to `sink`.
    pub fn run<F: FnMut(Record<'_>)>(&mut self, iters: usize, thin: usize, mut sink: F) -> Result<()> {
        let thin = thin.max(1);
        for it in 0..iters {
            let keep = it % thin == 0;
            self.step(it, |r| {
                if keep {
                    sink(r)
                }
            })?;
        }
        Ok(())
    }

    /// Raw access to the chain's stream, e.g. to interleave extra moves.
    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

/// Stream used for chain `index` of a run with a given seed; stream 0 is
/// left to data simulation.
pub fn run_stream(seed: u64, index: u64) -> ChainRng {
    chain_rng(seed, index + 1)
}

/// Samples and accounting from one chain.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub seed: u64,
    /// `(iteration, element, x)` per recorded sample.
    pub samples: Vec<(usize, usize, LatentSequence)>,
    pub tally: Tally,
    pub seconds: f64,
    pub labels: Vec<String>,
}

/// Runs one chain per seed, in parallel when enabled. Each chain's result
/// depends only on its seed.
pub fn run_chains(
    spec: &ModelSpec,
    y: &ObservationSequence,
    schedule: &Schedule,
    seeds: &[u64],
    iters: usize,
    thin: usize,
) -> Vec<Result<ChainOutput>> {
    map_indexed(seeds.len(), |k| run_one(spec, y, schedule, seeds[k], iters, thin))
}

fn run_one(
    spec: &ModelSpec,
    y: &ObservationSequence,
    schedule: &Schedule,
    seed: u64,
    iters: usize,
    thin: usize,
) -> Result<ChainOutput> {
    let started = Instant::now();
    let mut runner = ChainRunner::new(spec, y, schedule, Start::Prior, run_stream(seed, 0))?;
    let mut samples = Vec::new();
    runner.run(iters, thin, |r| samples.push((r.iteration, r.element, r.x.clone())))?;
    Ok(ChainOutput {
        seed,
        samples,
        tally: runner.tally().clone(),
        seconds: started.elapsed().as_secs_f64(),
        labels: runner.labels().to_vec(),
    })
}
