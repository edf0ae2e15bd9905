//! Vector autoregressive latent process with Poisson or Gaussian observations.
//!
//! The latent process is
//!
//! ```text
//! X_1       ~ N(0, Σ_init)
//! X_i | x   ~ N(Φ x, Σ),    Φ = diag(φ_1..φ_P),  Σ = equicorrelation(ρ)
//! ```
//!
//! and each coordinate is observed independently through one of the
//! [`ObsModel`] variants. All densities are returned in log space.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::rng::chain_rng;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Observation density of `y_{i,j}` given `x_{i,j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObsModel {
    /// `Poisson(exp(c_j + σ_j x))`
    LogLinkPoisson { c: Vec<f64>, sigma: Vec<f64> },
    /// `Poisson(σ_j |x|)`; the posterior is symmetric under `x → -x`.
    AbsPoisson { sigma: Vec<f64> },
    /// `N(x, τ_j²)`; makes the posterior exactly computable.
    GaussianObs { tau: Vec<f64> },
}

impl ObsModel {
    fn dim(&self) -> usize {
        match self {
            ObsModel::LogLinkPoisson { c, .. } => c.len(),
            ObsModel::AbsPoisson { sigma } => sigma.len(),
            ObsModel::GaussianObs { tau } => tau.len(),
        }
    }

    pub fn is_poisson(&self) -> bool {
        !matches!(self, ObsModel::GaussianObs { .. })
    }

    /// True when `p(y|x) = p(y|-x)` for every `y`.
    pub fn is_sign_symmetric(&self) -> bool {
        matches!(self, ObsModel::AbsPoisson { .. })
    }
}

/// An `n × P` array stored time-major (`values[i * p + j]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    n: usize,
    p: usize,
    values: Vec<f64>,
}

pub type LatentSequence = Sequence;
pub type ObservationSequence = Sequence;

impl Sequence {
    pub fn new(n: usize, p: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * p {
            return Err(Error::Shape(format!(
                "expected {} values for {n}x{p}, got {}",
                n * p,
                values.len()
            )));
        }
        Ok(Self { n, p, values })
    }

    pub fn filled(n: usize, p: usize, value: f64) -> Self {
        Self { n, p, values: vec![value; n * p] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.p + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The same rows in reverse time order.
    pub fn reversed(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for i in (0..self.n).rev() {
            values.extend_from_slice(self.row(i));
        }
        Self { n: self.n, p: self.p, values }
    }
}

/// Closed-form `Σ_init[j,k] = ρ_jk / (√(1-φ_j²) √(1-φ_k²))` with `ρ_jj = 1`.
///
/// This equals the stationary covariance of the process when all `φ_j` are
/// equal (or `ρ = 0`); see [`lyapunov_covariance`] for the general solution.
pub fn stationary_covariance(phi: &[f64], rho: f64) -> Result<DMatrix<f64>> {
    check_phi(phi)?;
    let p = phi.len();
    let lower = if p > 1 { -1.0 / (p as f64 - 1.0) } else { f64::NEG_INFINITY };
    if !(rho > lower && rho < 1.0) {
        return Err(Error::Parameter(format!("rho = {rho} outside the positive definite range for P = {p}")));
    }
    let scale: Vec<f64> = phi.iter().map(|f| (1.0 - f * f).sqrt()).collect();
    let m = DMatrix::from_fn(p, p, |j, k| {
        let r = if j == k { 1.0 } else { rho };
        r / (scale[j] * scale[k])
    });
    Cholesky::new(&m).map_err(|_| {
        Error::Parameter(format!("rho = {rho} gives a non positive definite covariance for P = {p}"))
    })?;
    Ok(m)
}

/// Solution of `S = Φ S Φ + Σ` for diagonal `Φ`: `S[j,k] = Σ[j,k] / (1 - φ_j φ_k)`.
pub fn lyapunov_covariance(phi: &[f64], rho: f64) -> DMatrix<f64> {
    let p = phi.len();
    DMatrix::from_fn(p, p, |j, k| {
        let r = if j == k { 1.0 } else { rho };
        r / (1.0 - phi[j] * phi[k])
    })
}

fn check_phi(phi: &[f64]) -> Result<()> {
    if phi.is_empty() {
        return Err(Error::Parameter("latent dimension must be positive".into()));
    }
    if let Some(f) = phi.iter().find(|f| !(f.abs() < 1.0)) {
        return Err(Error::Parameter(format!("|phi| must be < 1, got {f}")));
    }
    Ok(())
}

/// Immutable model description with cached covariance factors.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    n: usize,
    phi: Vec<f64>,
    rho: f64,
    obs: ObsModel,
    sigma: DMatrix<f64>,
    sigma_init: DMatrix<f64>,
    chol_sigma: Cholesky,
    chol_init: Cholesky,
}

impl ModelSpec {
    pub fn new(n: usize, phi: Vec<f64>, rho: f64, obs: ObsModel) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parameter("sequence length must be positive".into()));
        }
        let sigma_init = stationary_covariance(&phi, rho)?;
        let p = phi.len();
        if obs.dim() != p {
            return Err(Error::Shape(format!(
                "observation parameters have length {}, latent dimension is {p}",
                obs.dim()
            )));
        }
        match &obs {
            ObsModel::LogLinkPoisson { c, sigma } => {
                if sigma.len() != c.len() {
                    return Err(Error::Shape("c and sigma differ in length".into()));
                }
                if c.iter().chain(sigma).any(|v| !v.is_finite()) {
                    return Err(Error::Parameter("observation parameters must be finite".into()));
                }
            }
            ObsModel::AbsPoisson { sigma } => {
                if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                    return Err(Error::Parameter("sigma must be finite and >= 0".into()));
                }
            }
            ObsModel::GaussianObs { tau } => {
                if tau.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                    return Err(Error::Parameter("tau must be finite and > 0".into()));
                }
            }
        }
        let sigma = DMatrix::from_fn(p, p, |j, k| if j == k { 1.0 } else { rho });
        let chol_sigma = Cholesky::new(&sigma)?;
        let chol_init = Cholesky::new(&sigma_init)?;
        Ok(Self { n, phi, rho, obs, sigma, sigma_init, chol_sigma, chol_init })
    }

    /// The two test models with every coordinate sharing its parameters.
    pub fn log_link(n: usize, p: usize, phi: f64, rho: f64, c: f64, sigma: f64) -> Result<Self> {
        Self::new(
            n,
            vec![phi; p],
            rho,
            ObsModel::LogLinkPoisson { c: vec![c; p], sigma: vec![sigma; p] },
        )
    }

    pub fn abs_poisson(n: usize, p: usize, phi: f64, rho: f64, sigma: f64) -> Result<Self> {
        Self::new(n, vec![phi; p], rho, ObsModel::AbsPoisson { sigma: vec![sigma; p] })
    }

    pub fn gaussian(n: usize, p: usize, phi: f64, rho: f64, tau: f64) -> Result<Self> {
        Self::new(n, vec![phi; p], rho, ObsModel::GaussianObs { tau: vec![tau; p] })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.phi.len()
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn obs(&self) -> &ObsModel {
        &self.obs
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sigma_init(&self) -> &DMatrix<f64> {
        &self.sigma_init
    }

    pub fn chol_sigma(&self) -> &Cholesky {
        &self.chol_sigma
    }

    pub fn chol_init(&self) -> &Cholesky {
        &self.chol_init
    }

    pub fn phi_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.phi))
    }

    /// The same model with a different sequence length.
    pub fn with_len(&self, n: usize) -> Result<Self> {
        Self::new(n, self.phi.clone(), self.rho, self.obs.clone())
    }

    /// Whether the stationary process runs backward in time with the same
    /// transition density, which reversed-sequence updates rely on.
    pub fn is_time_reversible(&self) -> bool {
        let first = self.phi[0];
        self.rho == 0.0 || self.phi.iter().all(|f| *f == first)
    }

    /// `out = Φ x`
    pub fn trans_mean(&self, x_prev: &[f64], out: &mut [f64]) {
        for ((o, f), x) in out.iter_mut().zip(&self.phi).zip(x_prev) {
            *o = f * x;
        }
    }

    /// `log p(x | x_prev)`, or the time-1 density `N(0, Σ_init)` when `x_prev` is `None`.
    pub fn log_trans_density(&self, x_prev: Option<&[f64]>, x: &[f64]) -> f64 {
        match x_prev {
            None => self.chol_init.log_density(x),
            Some(prev) => {
                let p = self.p();
                let mut stack = [0.0; 32];
                let mut heap;
                let r: &mut [f64] = if p <= 32 {
                    &mut stack[..p]
                } else {
                    heap = vec![0.0; p];
                    &mut heap
                };
                for j in 0..p {
                    r[j] = x[j] - self.phi[j] * prev[j];
                }
                self.chol_sigma.log_density(r)
            }
        }
    }

    /// `log p(y_i | x_i)`, summed over coordinates.
    pub fn log_obs_density(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.obs {
            ObsModel::LogLinkPoisson { c, sigma } => {
                let mut acc = 0.0;
                for j in 0..x.len() {
                    let eta = c[j] + sigma[j] * x[j];
                    acc += y[j] * eta - eta.exp() - ln_factorial(y[j] as u64);
                }
                acc
            }
            ObsModel::AbsPoisson { sigma } => {
                let mut acc = 0.0;
                for j in 0..x.len() {
                    let rate = sigma[j] * x[j].abs();
                    if rate == 0.0 {
                        // pmf(0; 0) = 1, pmf(k > 0; 0) = 0
                        if y[j] > 0.0 {
                            return f64::NEG_INFINITY;
                        }
                    } else {
                        acc += y[j] * rate.ln() - rate - ln_factorial(y[j] as u64);
                    }
                }
                acc
            }
            ObsModel::GaussianObs { tau } => {
                let mut acc = 0.0;
                for j in 0..x.len() {
                    let z = (y[j] - x[j]) / tau[j];
                    acc += -0.5 * z * z - tau[j].ln() - HALF_LN_2PI;
                }
                acc
            }
        }
    }

    /// Draws `N(mean, LLᵀ)` into `out`.
    pub fn sample_gaussian<R: Rng + ?Sized>(
        chol: &Cholesky,
        mean: &[f64],
        rng: &mut R,
        out: &mut [f64],
    ) {
        let z: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
        chol.mul_vec(&z, out);
        for (o, m) in out.iter_mut().zip(mean) {
            *o += m;
        }
    }

    fn sample_obs<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, out: &mut [f64]) {
        for j in 0..x.len() {
            out[j] = match &self.obs {
                ObsModel::LogLinkPoisson { c, sigma } => poisson(rng, (c[j] + sigma[j] * x[j]).exp()),
                ObsModel::AbsPoisson { sigma } => poisson(rng, sigma[j] * x[j].abs()),
                ObsModel::GaussianObs { tau } => {
                    x[j] + tau[j] * rng.sample::<f64, _>(StandardNormal)
                }
            };
        }
    }

    /// Draws a latent path from the prior using `rng`.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentSequence {
        let (n, p) = (self.n, self.p());
        let mut x = Sequence::filled(n, p, 0.0);
        let zero = vec![0.0; p];
        let mut mean = vec![0.0; p];
        Self::sample_gaussian(&self.chol_init, &zero, rng, x.row_mut(0));
        for i in 1..n {
            self.trans_mean(x.row(i - 1), &mut mean);
            Self::sample_gaussian(&self.chol_sigma, &mean, rng, x.row_mut(i));
        }
        x
    }

    /// Simulates `(x, y)` deterministically from `seed` (stream 0 of that seed).
    pub fn simulate(&self, seed: u64) -> (LatentSequence, ObservationSequence) {
        let mut rng = chain_rng(seed, 0);
        let x = self.sample_prior(&mut rng);
        let mut y = Sequence::filled(self.n, self.p(), 0.0);
        for i in 0..self.n {
            self.sample_obs(x.row(i), &mut rng, y.row_mut(i));
        }
        (x, y)
    }

    pub fn check_observations(&self, y: &ObservationSequence) -> Result<()> {
        if y.len() != self.n || y.dim() != self.p() {
            return Err(Error::Shape(format!(
                "observations are {}x{}, model is {}x{}",
                y.len(),
                y.dim(),
                self.n,
                self.p()
            )));
        }
        if self.obs.is_poisson()
            && y.values().iter().any(|v| !(*v >= 0.0 && v.fract() == 0.0 && v.is_finite()))
        {
            return Err(Error::Parameter("Poisson observations must be non-negative integers".into()));
        }
        if y.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("observations must be finite".into()));
        }
        Ok(())
    }

    pub fn check_latent(&self, x: &LatentSequence) -> Result<()> {
        if x.len() != self.n || x.dim() != self.p() {
            return Err(Error::Shape(format!(
                "latent sequence is {}x{}, model is {}x{}",
                x.len(),
                x.dim(),
                self.n,
                self.p()
            )));
        }
        if x.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("latent values must be finite".into()));
        }
        Ok(())
    }
}

fn poisson<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    Poisson::new(rate).map(|d| d.sample(rng)).unwrap_or(f64::MAX)
}

/// Scalar-or-vector parameter in model files; scalars are broadcast to `P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Param {
    fn expand(&self, p: usize, name: &str) -> Result<Vec<f64>> {
        match self {
            Param::Scalar(v) => Ok(vec![*v; p]),
            Param::Vector(v) if v.len() == p => Ok(v.clone()),
            Param::Vector(v) => Err(Error::Shape(format!("{name} has {} entries, P = {p}", v.len()))),
        }
    }

    fn explicit_len(&self) -> Option<usize> {
        match self {
            Param::Scalar(_) => None,
            Param::Vector(v) => Some(v.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObsConfig {
    LogLinkPoisson { c: Param, sigma: Param },
    AbsPoisson { sigma: Param },
    GaussianObs { tau: Param },
}

/// Model file contents (TOML):
///
/// ```toml
/// n = 250
/// p = 10          # optional when phi is a list
/// phi = 0.9       # scalar or list of P values
/// rho = 0.7
/// seed = 1        # dataset seed used by `simulate`
///
/// [obs]
/// kind = "log_link_poisson"   # or "abs_poisson" / "gaussian_obs"
/// c = -0.4
/// sigma = 0.6
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n: usize,
    #[serde(default)]
    pub p: Option<usize>,
    pub phi: Param,
    pub rho: f64,
    #[serde(default)]
    pub seed: u64,
    pub obs: ObsConfig,
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let mut lens = vec![self.p, self.phi.explicit_len()];
        match &self.obs {
            ObsConfig::LogLinkPoisson { c, sigma } => {
                lens.push(c.explicit_len());
                lens.push(sigma.explicit_len());
            }
            ObsConfig::AbsPoisson { sigma } => lens.push(sigma.explicit_len()),
            ObsConfig::GaussianObs { tau } => lens.push(tau.explicit_len()),
        }
        let p = lens
            .into_iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::Config("latent dimension p is not given".into()))?;
        let obs = match &self.obs {
            ObsConfig::LogLinkPoisson { c, sigma } => ObsModel::LogLinkPoisson {
                c: c.expand(p, "c")?,
                sigma: sigma.expand(p, "sigma")?,
            },
            ObsConfig::AbsPoisson { sigma } => ObsModel::AbsPoisson { sigma: sigma.expand(p, "sigma")? },
            ObsConfig::GaussianObs { tau } => ObsModel::GaussianObs { tau: tau.expand(p, "tau")? },
        };
        ModelSpec::new(self.n, self.phi.expand(p, "phi")?, self.rho, obs)
    }
}
