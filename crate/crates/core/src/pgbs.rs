//! Particle Gibbs with backward sampling, using the latent transition as
//! importance density so that the weights reduce to `p(y_i | x_i)`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::ehmm::Direction;
use crate::error::{Error, Result};
use crate::model::{LatentSequence, ModelSpec, ObservationSequence, Sequence};
use crate::rng::sample_log_categorical;
use crate::tally::Tally;

/// Output of one conditional SMC sweep. Particle 0 at every time is the
/// conditioned path and its ancestor is always particle 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    n: usize,
    p: usize,
    size: usize,
    particles: Vec<f64>,
    log_w: Vec<f64>,
    weights: Vec<f64>,
    ancestors: Vec<usize>,
}

impl ParticleSystem {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_particles(&self) -> usize {
        self.size
    }

    pub fn particle(&self, i: usize, l: usize) -> &[f64] {
        let k = (i * self.size + l) * self.p;
        &self.particles[k..k + self.p]
    }

    /// Unnormalized `log w_i^[l]`.
    pub fn log_weight(&self, i: usize, l: usize) -> f64 {
        self.log_w[i * self.size + l]
    }

    /// Normalized weights at time `i`.
    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i * self.size..(i + 1) * self.size]
    }

    /// Ancestor at time `i - 1` of particle `l` at time `i` (`i ≥ 1`).
    pub fn ancestor(&self, i: usize, l: usize) -> usize {
        self.ancestors[(i - 1) * self.size + l]
    }

    /// Follows ancestors back from particle `l` at time `n`.
    pub fn lineage(&self, l: usize) -> LatentSequence {
        let mut idx = vec![0; self.n];
        idx[self.n - 1] = l;
        for i in (1..self.n).rev() {
            idx[i - 1] = self.ancestor(i, idx[i]);
        }
        self.collect(&idx)
    }

    fn collect(&self, idx: &[usize]) -> LatentSequence {
        let values = idx.iter().enumerate().flat_map(|(i, &l)| self.particle(i, l).iter().copied()).collect();
        Sequence::new(self.n, self.p, values).expect("shape")
    }
}

fn normalized(log_w: &[f64], time: usize) -> Result<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || log_w.iter().any(|w| w.is_nan()) {
        return Err(Error::Numerical(format!("all particle weights vanish at time {}", time + 1)));
    }
    let mut w: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    Ok(w)
}

/// Conditional SMC with `q_1 = p(x)`, `q_i = p(x | x_{i-1})` and
/// multinomial resampling of the free particles.
pub fn csmc<R: Rng + ?Sized>(
    x: &LatentSequence,
    spec: &ModelSpec,
    y: &ObservationSequence,
    size: usize,
    rng: &mut R,
    tally: &mut Tally,
) -> Result<ParticleSystem> {
    if size == 0 {
        return Err(Error::Config("particle count must be at least 1".into()));
    }
    spec.check_latent(x)?;
    spec.check_observations(y)?;
    let (n, p) = (x.len(), x.dim());
    let mut ps = ParticleSystem {
        n,
        p,
        size,
        particles: vec![0.0; n * size * p],
        log_w: vec![0.0; n * size],
        weights: vec![0.0; n * size],
        ancestors: vec![0; n.saturating_sub(1) * size],
    };
    let zero = vec![0.0; p];
    let mut mean = vec![0.0; p];
    for i in 0..n {
        let base = i * size * p;
        ps.particles[base..base + p].copy_from_slice(x.row(i));
        if i > 0 {
            let dist = WeightedIndex::new(&ps.weights[(i - 1) * size..i * size])
                .map_err(|e| Error::Numerical(format!("resampling at time {i}: {e}")))?;
            for l in 1..size {
                ps.ancestors[(i - 1) * size + l] = dist.sample(rng);
            }
        }
        for l in 1..size {
            let k = base + l * p;
            if i == 0 {
                ModelSpec::sample_gaussian(spec.chol_init(), &zero, rng, &mut ps.particles[k..k + p]);
            } else {
                let a = ps.ancestors[(i - 1) * size + l];
                let prev = ((i - 1) * size + a) * p;
                let (head, tail) = ps.particles.split_at_mut(base);
                spec.trans_mean(&head[prev..prev + p], &mut mean);
                ModelSpec::sample_gaussian(spec.chol_sigma(), &mean, rng, &mut tail[l * p..(l + 1) * p]);
            }
        }
        tally.obs_evals += size as u64;
        for l in 0..size {
            let k = base + l * p;
            ps.log_w[i * size + l] = spec.log_obs_density(&ps.particles[k..k + p], y.row(i));
        }
        let w = normalized(&ps.log_w[i * size..(i + 1) * size], i)?;
        ps.weights[i * size..(i + 1) * size].copy_from_slice(&w);
    }
    Ok(ps)
}

/// Backward selection: `x_n' ∝ W_n`, then
/// `x_i' ∝ w_i^[l] p(x_{i+1}' | x_i^[l])`.
pub fn backward_sample<R: Rng + ?Sized>(
    ps: &ParticleSystem,
    spec: &ModelSpec,
    rng: &mut R,
    tally: &mut Tally,
) -> Result<LatentSequence> {
    let (n, size) = (ps.n, ps.size);
    let mut idx = vec![0; n];
    idx[n - 1] = sample_log_categorical(&ps.log_w[(n - 1) * size..], rng)
        .map_err(|_| Error::Numerical(format!("all particle weights vanish at time {n}")))?;
    let mut lw = vec![0.0; size];
    for i in (0..n - 1).rev() {
        let next = ps.particle(i + 1, idx[i + 1]);
        tally.trans_evals += size as u64;
        for (l, w) in lw.iter_mut().enumerate() {
            *w = ps.log_weight(i, l) + spec.log_trans_density(Some(ps.particle(i, l)), next);
        }
        idx[i] = sample_log_categorical(&lw, rng)
            .map_err(|_| Error::Numerical(format!("backward weights vanish at time {}", i + 1)))?;
    }
    Ok(ps.collect(&idx))
}

/// Conditional SMC followed by backward sampling, on the sequence as given
/// or on its time reversal.
pub fn pgbs_update<R: Rng + ?Sized>(
    x: &LatentSequence,
    spec: &ModelSpec,
    y: &ObservationSequence,
    size: usize,
    direction: Direction,
    rng: &mut R,
    tally: &mut Tally,
) -> Result<LatentSequence> {
    match direction {
        Direction::Forward => {
            let ps = csmc(x, spec, y, size, rng, tally)?;
            backward_sample(&ps, spec, rng, tally)
        }
        Direction::Reversed => {
            if !spec.is_time_reversible() {
                return Err(Error::Config(
                    "reversed-sequence updates need a time-reversible latent process (equal phi_j or rho = 0)".into(),
                ));
            }
            let mut local = Tally::default();
            let out = pgbs_update(&x.reversed(), spec, &y.reversed(), size, Direction::Forward, rng, &mut local)?;
            tally.merge_reversed(&local, x.len());
            Ok(out.reversed())
        }
        Direction::Backward => Err(Error::Config("particle Gibbs runs forward or on the reversed sequence".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chain_rng;

    #[test]
    fn conditioned_path_survives() {
        let spec = ModelSpec::log_link(8, 2, 0.9, 0.4, -0.4, 0.6).unwrap();
        let (x, y) = spec.simulate(1);
        let ps = csmc(&x, &spec, &y, 20, &mut chain_rng(1, 0), &mut Tally::default()).unwrap();
        assert_eq!(ps.lineage(0), x);
        for i in 0..8 {
            assert!((ps.weights(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if i > 0 {
                assert_eq!(ps.ancestor(i, 0), 0);
            }
        }
    }

    #[test]
    fn flat_observations_give_uniform_weights() {
        let spec = ModelSpec::log_link(5, 1, 0.9, 0.0, 0.0, 0.0).unwrap();
        let (x, y) = spec.simulate(2);
        let ps = csmc(&x, &spec, &y, 7, &mut chain_rng(2, 0), &mut Tally::default()).unwrap();
        for i in 0..5 {
            assert!(ps.weights(i).iter().all(|w| (w - 1.0 / 7.0).abs() < 1e-15));
        }
    }

    #[test]
    fn single_particle_is_the_identity() {
        let spec = ModelSpec::log_link(6, 2, 0.9, 0.4, -0.4, 0.6).unwrap();
        let (x, y) = spec.simulate(3);
        let mut rng = chain_rng(3, 0);
        let ps = csmc(&x, &spec, &y, 1, &mut rng, &mut Tally::default()).unwrap();
        assert!((0..6).all(|i| ps.weights(i) == [1.0]));
        for dir in [Direction::Forward, Direction::Reversed] {
            assert_eq!(pgbs_update(&x, &spec, &y, 1, dir, &mut rng, &mut Tally::default()).unwrap(), x);
        }
    }

    #[test]
    fn backward_sampling_matches_path_enumeration() {
        let spec = ModelSpec::log_link(2, 1, 0.8, 0.0, 0.2, 0.7).unwrap();
        let ps = ParticleSystem {
            n: 2,
            p: 1,
            size: 2,
            particles: vec![0.4, -0.6, 1.2, 0.1],
            log_w: vec![-0.3, -1.4, 0.2, -0.5],
            weights: vec![0.0; 4],
            ancestors: vec![0, 0],
        };
        let w = |i: usize, l: usize| ps.log_weight(i, l).exp();
        let t = |a: usize, b: usize| spec.log_trans_density(Some(ps.particle(0, a)), ps.particle(1, b)).exp();
        let mut exact = [[0.0; 2]; 2];
        for b in 0..2 {
            let wb = w(1, b) / (w(1, 0) + w(1, 1));
            let z = w(0, 0) * t(0, b) + w(0, 1) * t(1, b);
            for a in 0..2 {
                exact[a][b] = wb * w(0, a) * t(a, b) / z;
            }
        }
        let mut rng = chain_rng(4, 0);
        let draws = 100_000;
        let mut counts = [[0usize; 2]; 2];
        for _ in 0..draws {
            let s = backward_sample(&ps, &spec, &mut rng, &mut Tally::default()).unwrap();
            let a = if s.get(0, 0) == 0.4 { 0 } else { 1 };
            let b = if s.get(1, 0) == 1.2 { 0 } else { 1 };
            counts[a][b] += 1;
        }
        for a in 0..2 {
            for b in 0..2 {
                let f = counts[a][b] as f64 / draws as f64;
                let se = (exact[a][b] * (1.0 - exact[a][b]) / draws as f64).sqrt();
                assert!((f - exact[a][b]).abs() < 3.5 * se + 1e-4, "{a}{b}: {f} vs {}", exact[a][b]);
            }
        }
    }

    #[test]
    fn impossible_observations_are_fatal() {
        let spec = ModelSpec::abs_poisson(3, 1, 0.9, 0.0, 0.8).unwrap();
        let x = Sequence::new(3, 1, vec![0.0, 0.0, 0.0]).unwrap();
        let y = Sequence::new(3, 1, vec![0.0, 2.0, 0.0]).unwrap();
        // only the conditioned particle at x = 0, which cannot emit y = 2
        let err = csmc(&x, &spec, &y, 1, &mut chain_rng(5, 0), &mut Tally::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("time 2")));
    }

    #[test]
    fn cost_is_linear_in_particles() {
        let spec = ModelSpec::log_link(30, 3, 0.9, 0.4, -0.4, 0.6).unwrap();
        let (x, y) = spec.simulate(6);
        let mut rng = chain_rng(6, 0);
        let mut count = |l| {
            let mut t = Tally::default();
            pgbs_update(&x, &spec, &y, l, Direction::Forward, &mut rng, &mut t).unwrap();
            t.density_evals()
        };
        let (a, b) = (count(40), count(80));
        assert!(b as f64 <= 2.2 * a as f64);
    }
}
