//! Gaussian densities with stored Cholesky factors, and log-space helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log(sum(exp(v)))`, returning `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Normalized weights `softmax(logw)` and the log normalizer `log(sum(exp(logw)))`.
pub fn normalize_log_weights(logw: &[f64], out: &mut [f64]) -> f64 {
    let lse = log_sum_exp(logw);
    for (o, &l) in out.iter_mut().zip(logw) {
        *o = (l - lse).exp();
    }
    lse
}

/// Scalar normal log density with variance `var`.
#[inline]
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// A multivariate Gaussian `N(mean, cov)` with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "mean has length {d} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let chol = cholesky(&cov, "covariance")?;
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            log_det,
        })
    }

    pub fn diagonal(mean: DVector<f64>, var: &[f64]) -> Result<Self> {
        Self::new(mean, DMatrix::from_diagonal(&DVector::from_column_slice(var)))
    }

    pub fn standard(d: usize) -> Self {
        Self::new(DVector::zeros(d), DMatrix::identity(d, d)).expect("identity is PD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular `L` with `L Lᵀ = cov`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let diff = DVector::from_iterator(d, x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        -0.5 * (d as f64 * LN_2PI + self.log_det + z.norm_squared())
    }

    /// `mean + L eps`.
    pub fn sample_from_noise(&self, eps: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut v = self.mean[i];
            for j in 0..=i {
                v += self.chol[(i, j)] * eps[j];
            }
            out[i] = v;
        }
    }
}

/// Lower Cholesky factor, or [`Error::NotPositiveDefinite`].
pub fn cholesky(m: &DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("`{name}` is not square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(name));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * (1.0 + m.amax()) {
        return Err(Error::NotPositiveDefinite(name));
    }
    Cholesky::<f64, Dyn>::new(m.clone())
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite(name))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// `out = m x` for a column-major dense matrix.
pub fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (r, c) = m.shape();
    out[..r].fill(0.0);
    for j in 0..c {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        let col = m.column(j);
        for i in 0..r {
            out[i] += col[i] * xj;
        }
    }
}

/// `out += coeff · mᵀ v`.
pub fn mat_t_vec_acc(m: &DMatrix<f64>, v: &[f64], coeff: f64, out: &mut [f64]) {
    let (r, c) = m.shape();
    for j in 0..c {
        let col = m.column(j);
        let mut s = 0.0;
        for i in 0..r {
            s += col[i] * v[i];
        }
        out[j] += coeff * s;
    }
}

/// Whether all off-diagonal entries are exactly zero.
pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let (r, c) = m.shape();
    (0..c).all(|j| (0..r).all(|i| i == j || m[(i, j)] == 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[f64::NEG_INFINITY, 0.0]) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn standard_normal_logpdf_at_origin() {
        let g = GaussianDensity::standard(1);
        assert!((g.logpdf(&[0.0]) + 0.918_938_533_204_672_7).abs() < 1e-14);
        assert!((normal_logpdf(0.0, 0.0, 1.0) + 0.918_938_533_204_672_7).abs() < 1e-14);
    }

    #[test]
    fn degenerate_covariance_is_rejected() {
        let r = GaussianDensity::new(DVector::zeros(2), DMatrix::zeros(2, 2));
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianDensity::new(DVector::zeros(2), asym).is_err());
    }

    #[test]
    fn full_covariance_logpdf_matches_explicit_formula() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let g = GaussianDensity::new(DVector::from_vec(vec![1.0, -1.0]), cov.clone()).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.4]);
        let diff = &x - g.mean();
        let quad = (diff.transpose() * cov.clone().try_inverse().unwrap() * &diff)[(0, 0)];
        let expect = -0.5 * (2.0 * LN_2PI + cov.determinant().ln() + quad);
        assert!((g.logpdf(x.as_slice()) - expect).abs() < 1e-12);
    }
}
