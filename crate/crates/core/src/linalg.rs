//! Small dense helpers for the hot paths. Latent dimensions are small (tens at
//! most), so factors are stored as flat row-major buffers and the inner loops
//! avoid allocating.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const STACK_DIM: usize = 32;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Lower-triangular Cholesky factor `L` with `LLᵀ = S`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    l: Vec<f64>,
    log_det_half: f64,
}

impl Cholesky {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let dim = cov.nrows();
        if cov.ncols() != dim {
            return Err(Error::Shape(format!("covariance is {}x{}", dim, cov.ncols())));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Parameter("covariance is not positive definite".into()))?;
        let lm = chol.l();
        let mut l = vec![0.0; dim * dim];
        let mut log_det_half = 0.0;
        for r in 0..dim {
            for c in 0..=r {
                l[r * dim + c] = lm[(r, c)];
            }
            log_det_half += lm[(r, r)].ln();
        }
        Ok(Self { dim, l, log_det_half })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.l)
    }

    /// `out = L z`
    pub fn mul_vec(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for r in 0..d {
            let row = &self.l[r * d..r * d + r + 1];
            out[r] = row.iter().zip(&z[..=r]).map(|(a, b)| a * b).sum();
        }
    }

    /// `‖L⁻¹ r‖²` by forward substitution.
    pub fn quad_form(&self, r: &[f64]) -> f64 {
        let d = self.dim;
        let mut stack = [0.0; STACK_DIM];
        let mut heap;
        let w: &mut [f64] = if d <= STACK_DIM {
            &mut stack[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut acc = 0.0;
        for i in 0..d {
            let row = &self.l[i * d..i * d + i];
            let s: f64 = row.iter().zip(w[..i].iter()).map(|(a, b)| a * b).sum();
            w[i] = (r[i] - s) / self.l[i * d + i];
            acc += w[i] * w[i];
        }
        acc
    }

    /// Log density of `N(0, LLᵀ)` at the residual `r`.
    pub fn log_density(&self, r: &[f64]) -> f64 {
        -0.5 * self.quad_form(r) - self.log_det_half - self.dim as f64 * HALF_LN_2PI
    }
}

/// `max + ln Σ exp(v - max)`; `-inf` when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Inverse of a symmetric positive definite matrix.
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_matches_direct_formula() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let chol = Cholesky::new(&cov).unwrap();
        let r = [0.3, -1.2];
        let inv = cov.clone().try_inverse().unwrap();
        let v = nalgebra::DVector::from_row_slice(&r);
        let q = (v.transpose() * &inv * &v)[(0, 0)];
        let expected = -0.5 * q - 0.5 * cov.determinant().ln() - (2.0 * std::f64::consts::PI).ln();
        assert!((chol.log_density(&r) - expected).abs() < 1e-12);
    }

    #[test]
    fn mul_vec_reconstructs_factor() {
        let cov = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let chol = Cholesky::new(&cov).unwrap();
        let lm = chol.matrix();
        assert!((&lm * lm.transpose() - &cov).abs().max() < 1e-12);
        let z = [1.0, -2.0, 0.5];
        let mut out = [0.0; 3];
        chol.mul_vec(&z, &mut out);
        let expect = &lm * nalgebra::DVector::from_row_slice(&z);
        for k in 0..3 {
            assert!((out[k] - expect[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Cholesky::new(&cov).is_err());
    }
}
