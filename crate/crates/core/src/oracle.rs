//! Exact references for testing: Kalman smoothing and forward-filter
//! backward-sampling for Gaussian observations, and a discretized HMM for
//! one-dimensional Poisson models.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Cholesky};
use crate::model::{LatentSequence, ModelSpec, ObsModel, ObservationSequence, Sequence};
use crate::parallel::for_each_chunk_mut;

#[derive(Debug, Clone, Serialize)]
pub struct SmootherResult {
    /// Posterior means, `n × P`.
    pub means: Vec<Vec<f64>>,
    /// Posterior covariances, one `P × P` row-major block per time.
    pub covariances: Vec<Vec<f64>>,
    /// `log p(y)`.
    pub loglik: f64,
}

impl SmootherResult {
    pub fn variance(&self, i: usize, j: usize) -> f64 {
        let p = self.means[i].len();
        self.covariances[i][j * p + j]
    }
}

/// Filtered moments for a linear-Gaussian model, reusable for smoothing
/// and exact posterior draws.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    phi: DMatrix<f64>,
    pred_mean: Vec<DVector<f64>>,
    pred_cov: Vec<DMatrix<f64>>,
    filt_mean: Vec<DVector<f64>>,
    filt_cov: Vec<DMatrix<f64>>,
    loglik: f64,
}

fn checked(m: DMatrix<f64>, what: &str, i: usize) -> Result<DMatrix<f64>> {
    let m = symmetrize(&m);
    // allow exact zeros from degenerate draws but not negative directions
    let shifted = &m + DMatrix::identity(m.nrows(), m.nrows()) * (1e-12 * m.diagonal().amax().max(1e-300));
    if shifted.cholesky().is_none() {
        return Err(Error::Numerical(format!("{what} at time {} is not positive semi-definite", i + 1)));
    }
    Ok(m)
}

impl GaussianPosterior {
    pub fn new(spec: &ModelSpec, y: &ObservationSequence) -> Result<Self> {
        let ObsModel::GaussianObs { tau } = spec.obs() else {
            return Err(Error::Config("the Kalman oracle needs Gaussian observations".into()));
        };
        spec.check_observations(y)?;
        let (n, p) = (spec.n(), spec.p());
        let phi = spec.phi_matrix();
        let r = DMatrix::from_diagonal(&DVector::from_iterator(p, tau.iter().map(|t| t * t)));
        let mut out = Self {
            phi: phi.clone(),
            pred_mean: Vec::with_capacity(n),
            pred_cov: Vec::with_capacity(n),
            filt_mean: Vec::with_capacity(n),
            filt_cov: Vec::with_capacity(n),
            loglik: 0.0,
        };
        for i in 0..n {
            let (m, c) = if i == 0 {
                (DVector::zeros(p), spec.sigma_init().clone())
            } else {
                let prev_m = &out.filt_mean[i - 1];
                let prev_c = &out.filt_cov[i - 1];
                (&phi * prev_m, &phi * prev_c * &phi + spec.sigma())
            };
            let s = symmetrize(&(&c + &r));
            let chol_s = Cholesky::new(&s).map_err(|_| Error::Numerical(format!("innovation covariance at time {}", i + 1)))?;
            let obs = DVector::from_row_slice(y.row(i));
            let resid = &obs - &m;
            out.loglik += chol_s.log_density(resid.as_slice());
            let s_inv = s.clone().cholesky().expect("checked above").inverse();
            let gain = &c * &s_inv;
            let fm = &m + &gain * &resid;
            let fc = checked(&c - &gain * &c, "filtered covariance", i)?;
            out.pred_mean.push(m);
            out.pred_cov.push(c);
            out.filt_mean.push(fm);
            out.filt_cov.push(fc);
        }
        Ok(out)
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    fn smoother_gain(&self, i: usize) -> Result<DMatrix<f64>> {
        let pred = &self.pred_cov[i + 1];
        let inv = pred
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("predicted covariance at time {}", i + 2)))?
            .inverse();
        Ok(&self.filt_cov[i] * self.phi.transpose() * inv)
    }

    /// Rauch–Tung–Striebel smoothing.
    pub fn smooth(&self) -> Result<SmootherResult> {
        let n = self.filt_mean.len();
        let mut means = vec![DVector::zeros(0); n];
        let mut covs = vec![DMatrix::zeros(0, 0); n];
        means[n - 1] = self.filt_mean[n - 1].clone();
        covs[n - 1] = self.filt_cov[n - 1].clone();
        for i in (0..n - 1).rev() {
            let g = self.smoother_gain(i)?;
            means[i] = &self.filt_mean[i] + &g * (&means[i + 1] - &self.pred_mean[i + 1]);
            let c = &self.filt_cov[i] + &g * (&covs[i + 1] - &self.pred_cov[i + 1]) * g.transpose();
            covs[i] = checked(c, "smoothed covariance", i)?;
        }
        Ok(SmootherResult {
            means: means.iter().map(|m| m.as_slice().to_vec()).collect(),
            covariances: covs.iter().map(|c| c.transpose().as_slice().to_vec()).collect(),
            loglik: self.loglik,
        })
    }

    /// Precomputes the backward-sampling factors for repeated exact draws.
    pub fn sampler(&self) -> Result<PosteriorSampler> {
        let n = self.filt_mean.len();
        let mut gains = Vec::with_capacity(n.saturating_sub(1));
        let mut chols = Vec::with_capacity(n);
        for i in 0..n - 1 {
            let g = self.smoother_gain(i)?;
            let c = checked(&self.filt_cov[i] - &g * &self.pred_cov[i + 1] * g.transpose(), "sampling covariance", i)?;
            chols.push(psd_factor(&c));
            gains.push(g);
        }
        chols.push(psd_factor(&self.filt_cov[n - 1]));
        Ok(PosteriorSampler { post: self.clone(), gains, chols })
    }
}

/// Lower factor of a PSD matrix, tolerating exact singularity.
fn psd_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    let p = c.nrows();
    let jitter = 1e-300_f64.max(1e-14 * c.diagonal().amax());
    match c.clone().cholesky() {
        Some(ch) => ch.l(),
        None => (c + DMatrix::identity(p, p) * jitter).cholesky().map(|ch| ch.l()).unwrap_or_else(|| DMatrix::zeros(p, p)),
    }
}

/// Exact draws from `p(x | y)` by forward filtering, backward sampling.
#[derive(Debug, Clone)]
pub struct PosteriorSampler {
    post: GaussianPosterior,
    gains: Vec<DMatrix<f64>>,
    chols: Vec<DMatrix<f64>>,
}

impl PosteriorSampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentSequence {
        let n = self.post.filt_mean.len();
        let p = self.post.filt_mean[0].len();
        let mut gauss = |chol: &DMatrix<f64>| {
            let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
            chol * z
        };
        let mut xs = vec![DVector::zeros(p); n];
        xs[n - 1] = &self.post.filt_mean[n - 1] + gauss(&self.chols[n - 1]);
        for i in (0..n - 1).rev() {
            let mean = &self.post.filt_mean[i] + &self.gains[i] * (&xs[i + 1] - &self.post.pred_mean[i + 1]);
            xs[i] = mean + gauss(&self.chols[i]);
        }
        let values = xs.iter().flat_map(|x| x.iter().copied()).collect();
        Sequence::new(n, p, values).expect("shape")
    }
}

/// Posterior marginal means, covariances and `log p(y)` for Gaussian observations.
pub fn kalman_smoother(spec: &ModelSpec, y: &ObservationSequence) -> Result<SmootherResult> {
    GaussianPosterior::new(spec, y)?.smooth()
}

/// Uniform grid for the one-dimensional discretized HMM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Grid {
    /// `points` values spanning ±6 stationary standard deviations.
    pub fn stationary(spec: &ModelSpec, points: usize) -> Self {
        let s = spec.sigma_init()[(0, 0)].sqrt();
        Self { lower: -6.0 * s, upper: 6.0 * s, points }
    }

    pub fn values(&self) -> Vec<f64> {
        let h = (self.upper - self.lower) / (self.points - 1) as f64;
        (0..self.points).map(|k| self.lower + h * k as f64).collect()
    }
}

/// Share of grid points on each side counted as the boundary region.
const BOUNDARY_SHARE: f64 = 0.01;
pub const BOUNDARY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GridPosterior {
    pub grid: Vec<f64>,
    /// Per-time pmfs over `grid`.
    pub marginals: Vec<Vec<f64>>,
    /// Largest posterior mass over all times within the outer 1% of the
    /// grid on either side.
    pub boundary_mass: f64,
}

impl GridPosterior {
    pub fn mean(&self, i: usize) -> f64 {
        self.marginals[i].iter().zip(&self.grid).map(|(w, x)| w * x).sum()
    }

    pub fn variance(&self, i: usize) -> f64 {
        let m = self.mean(i);
        self.marginals[i].iter().zip(&self.grid).map(|(w, x)| w * (x - m) * (x - m)).sum()
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.marginals.len()).map(|i| self.mean(i)).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.marginals.len()).map(|i| self.variance(i)).collect()
    }

    /// Text for the caller to surface when the grid looks too narrow.
    pub fn warning(&self) -> Option<String> {
        (self.boundary_mass > BOUNDARY_TOLERANCE)
            .then(|| format!("grid may be too narrow: boundary mass {:.3e}", self.boundary_mass))
    }
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let z: f64 = v.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Numerical("grid recursion lost all mass".into()));
    }
    v.iter_mut().for_each(|w| *w /= z);
    Ok(())
}

/// `out = Tᵀ v` for row-stochastic `T` stored row-major.
fn push_forward(trans: &[f64], v: &[f64], out: &mut [f64]) {
    let m = v.len();
    for_each_chunk_mut(out, 64, |k, chunk| {
        for (off, o) in chunk.iter_mut().enumerate() {
            let b = k * 64 + off;
            *o = (0..m).map(|a| v[a] * trans[a * m + b]).sum();
        }
    });
}

/// `out = T v`.
fn pull_back(trans: &[f64], v: &[f64], out: &mut [f64]) {
    let m = v.len();
    for_each_chunk_mut(out, 64, |k, chunk| {
        for (off, o) in chunk.iter_mut().enumerate() {
            let a = k * 64 + off;
            *o = trans[a * m..(a + 1) * m].iter().zip(v).map(|(t, w)| t * w).sum();
        }
    });
}

/// Exact forward–backward on the model restricted to `grid`, with the
/// initial and transition densities renormalized over the grid points.
pub fn grid_hmm_posterior(spec: &ModelSpec, y: &ObservationSequence, grid: Grid) -> Result<GridPosterior> {
    if spec.p() != 1 {
        return Err(Error::Config(format!("grid oracle needs P = 1, got P = {}", spec.p())));
    }
    if grid.points < 2 || grid.lower >= grid.upper {
        return Err(Error::Config("grid needs at least two points and lower < upper".into()));
    }
    spec.check_observations(y)?;
    let xs = grid.values();
    let (n, m) = (spec.n(), grid.points);

    let mut trans = vec![0.0; m * m];
    for_each_chunk_mut(&mut trans, m, |a, row| {
        for (b, t) in row.iter_mut().enumerate() {
            *t = spec.log_trans_density(Some(&[xs[a]]), &[xs[b]]).exp();
        }
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            row.iter_mut().for_each(|t| *t /= z);
        }
    });

    let obs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let ll: Vec<f64> = xs.iter().map(|x| spec.log_obs_density(&[*x], y.row(i))).collect();
            let max = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ll.iter().map(|l| (l - max).exp()).collect()
        })
        .collect();

    let mut alpha = vec![vec![0.0; m]; n];
    let mut init: Vec<f64> = xs.iter().map(|x| spec.log_trans_density(None, &[*x]).exp()).collect();
    normalize(&mut init)?;
    for b in 0..m {
        alpha[0][b] = init[b] * obs[0][b];
    }
    normalize(&mut alpha[0])?;
    let mut tmp = vec![0.0; m];
    for i in 1..n {
        push_forward(&trans, &alpha[i - 1], &mut tmp);
        for b in 0..m {
            alpha[i][b] = tmp[b] * obs[i][b];
        }
        normalize(&mut alpha[i])
            .map_err(|_| Error::Numerical(format!("grid recursion lost all mass at time {}", i + 1)))?;
    }

    let mut marginals = vec![vec![0.0; m]; n];
    let mut beta = vec![1.0; m];
    for i in (0..n).rev() {
        if i + 1 < n {
            let w: Vec<f64> = (0..m).map(|b| obs[i + 1][b] * beta[b]).collect();
            pull_back(&trans, &w, &mut tmp);
            beta.copy_from_slice(&tmp);
            normalize(&mut beta)?;
        }
        for a in 0..m {
            marginals[i][a] = alpha[i][a] * beta[a];
        }
        normalize(&mut marginals[i])?;
    }

    let edge = ((m as f64 * BOUNDARY_SHARE).ceil() as usize).max(1);
    let boundary_mass = marginals
        .iter()
        .map(|pm| pm[..edge].iter().sum::<f64>() + pm[m - edge..].iter().sum::<f64>())
        .fold(0.0, f64::max);
    Ok(GridPosterior { grid: xs, marginals, boundary_mass })
}
