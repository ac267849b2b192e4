//! State-space models, exact oracles and data simulation.
//!
//! A model supplies the initial/transition density `f`, the observation
//! density `g`, reparameterized samplers for both, and the partial
//! derivatives that pathwise gradient estimators need. Model parameters
//! (`theta`) live inside the model value; [`StateSpaceModel::with_theta`]
//! rebuilds a model from a flat parameter vector.

mod grid;
mod lgssm;
mod stochvol;
mod toy;

pub use grid::{grid_log_normalizer, grid_posterior_1d, linspace, trapezoid};
pub use lgssm::{lgssm_log_marginal, lgssm_optimal_proposal, CKind, LgssmModel};
pub(crate) use lgssm::OptimalStep;
pub use stochvol::StochVolModel;
pub use toy::{BimodalModel, ToyQuadraticModel};

use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, stream_rng};

pub trait StateSpaceModel: std::fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    /// `log f(x | x_prev)`; `x_prev` is `None` at the first step, where `f`
    /// is the initial density.
    fn log_transition(&self, x_prev: Option<&[f64]>, x: &[f64]) -> f64;
    /// `log g(y | x)`.
    fn log_observation(&self, x: &[f64], y: &[f64]) -> f64;

    /// Draw from `f(· | x_prev)` using standard normal noise of length `state_dim`.
    fn transition_from_noise(&self, x_prev: Option<&[f64]>, eps: &[f64], out: &mut [f64]);
    /// Draw from `g(· | x)` using standard normal noise of length `obs_dim`.
    fn observation_from_noise(&self, x: &[f64], eps: &[f64], out: &mut [f64]);

    fn num_theta(&self) -> usize {
        0
    }
    /// Flat unconstrained parameter vector.
    fn theta(&self) -> Vec<f64> {
        Vec::new()
    }
    fn with_theta(&self, theta: &[f64]) -> Result<Box<dyn StateSpaceModel>>;

    /// Adds `coeff ·` the partial derivatives of `log f(x | x_prev)`.
    fn grad_log_transition(
        &self,
        x_prev: Option<&[f64]>,
        x: &[f64],
        coeff: f64,
        gx: &mut [f64],
        gx_prev: Option<&mut [f64]>,
        gtheta: Option<&mut [f64]>,
    );

    /// Adds `coeff ·` the partial derivatives of `log g(y | x)`.
    fn grad_log_observation(
        &self,
        x: &[f64],
        y: &[f64],
        coeff: f64,
        gx: &mut [f64],
        gtheta: Option<&mut [f64]>,
    );

    /// Writes mean and per-coordinate variance when `f(· | x_prev)` is a
    /// Gaussian with diagonal covariance; returns `false` otherwise.
    fn diag_gaussian_transition(
        &self,
        _x_prev: Option<&[f64]>,
        _mean: &mut [f64],
        _var: &mut [f64],
    ) -> bool {
        false
    }

    /// Vector-Jacobian product of the map `(x_prev, theta) -> (mean, var)`
    /// from [`StateSpaceModel::diag_gaussian_transition`].
    fn diag_gaussian_transition_vjp(
        &self,
        _x_prev: Option<&[f64]>,
        _v_mean: &[f64],
        _v_var: &[f64],
        _gx_prev: Option<&mut [f64]>,
        _gtheta: Option<&mut [f64]>,
    ) {
    }
}

/// Observations `y_{1:T}`, stored row-major as `T × obs_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    obs_dim: usize,
}

impl Dataset {
    pub fn new(y: Vec<f64>, obs_dim: usize) -> Result<Self> {
        if obs_dim == 0 || y.is_empty() || !y.len().is_multiple_of(obs_dim) {
            return Err(Error::InvalidArgument(format!(
                "dataset needs T >= 1 rows of {obs_dim} values, got {} values",
                y.len()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite observation at row {}, column {}",
                i / obs_dim,
                i % obs_dim
            )));
        }
        Ok(Self { y, obs_dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("ragged dataset rows".into()));
        }
        Self::new(rows.concat(), d)
    }

    /// `T` copies of the same observation vector.
    pub fn constant(value: &[f64], len: usize) -> Result<Self> {
        Self::new(value.repeat(len), value.len())
    }

    pub fn len(&self) -> usize {
        self.y.len() / self.obs_dim
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn y(&self, t: usize) -> &[f64] {
        &self.y[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.y
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.y.chunks_exact(self.obs_dim)
    }

    pub fn truncated(&self, len: usize) -> Result<Self> {
        Self::new(self.y[..len.min(self.len()) * self.obs_dim].to_vec(), self.obs_dim)
    }
}

/// Simulates `(y_{1:T}, x_{1:T})` from the model's generative process.
///
/// The latent path is returned row-major (`T × state_dim`). Output is a
/// deterministic function of `(model, len, seed)`.
pub fn simulate_dataset(
    model: &dyn StateSpaceModel,
    len: usize,
    seed: u64,
) -> Result<(Dataset, Vec<f64>)> {
    if len == 0 {
        return Err(Error::InvalidArgument("T must be at least 1".into()));
    }
    let (dx, dy) = (model.state_dim(), model.obs_dim());
    let mut rng = stream_rng(seed, 0);
    let mut xs = vec![0.0; len * dx];
    let mut ys = vec![0.0; len * dy];
    let mut ex = vec![0.0; dx];
    let mut ey = vec![0.0; dy];
    for t in 0..len {
        fill_standard_normal(&mut rng, &mut ex);
        let (done, rest) = xs.split_at_mut(t * dx);
        let prev = (t > 0).then(|| &done[(t - 1) * dx..]);
        model.transition_from_noise(prev, &ex, &mut rest[..dx]);
        fill_standard_normal(&mut rng, &mut ey);
        model.observation_from_noise(&rest[..dx], &ey, &mut ys[t * dy..(t + 1) * dy]);
    }
    Ok((Dataset::new(ys, dy)?, xs))
}

/// Exact `log p(x_{1:T}, y_{1:T})` for a latent path stored row-major.
pub fn log_joint(model: &dyn StateSpaceModel, data: &Dataset, xs: &[f64]) -> f64 {
    let dx = model.state_dim();
    let mut total = 0.0;
    for t in 0..data.len() {
        let x = &xs[t * dx..(t + 1) * dx];
        let prev = (t > 0).then(|| &xs[(t - 1) * dx..t * dx]);
        total += model.log_transition(prev, x) + model.log_observation(x, data.y(t));
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn scalar_lgssm(a: f64) -> LgssmModel {
        LgssmModel::scalar(a, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn simulation_is_deterministic_in_seed() {
        let m = scalar_lgssm(0.5);
        let (d1, x1) = simulate_dataset(&m, 50, 11).unwrap();
        let (d2, x2) = simulate_dataset(&m, 50, 11).unwrap();
        let (d3, _) = simulate_dataset(&m, 50, 12).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(x1, x2);
        assert_ne!(d1, d3);
    }

    #[test]
    fn zero_process_noise_is_a_construction_error() {
        let r = LgssmModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            crate::linalg::GaussianDensity::standard(1),
        );
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn simulated_ar1_has_stationary_lag_one_autocorrelation() {
        // Var = Q / (1 - A^2); lag-1 autocovariance = A Var, so the
        // stationary autocorrelation is A Var / Var = 0.5.
        let m = scalar_lgssm(0.5);
        let (_, x) = simulate_dataset(&m, 10_000, 3).unwrap();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let cov = x
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / (n - 1.0);
        let rho = cov / var;
        assert!((rho - 0.5).abs() < 0.03, "rho = {rho}");
        assert!((var - 4.0 / 3.0).abs() < 0.1, "var = {var}");
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![], 1).is_err());
        assert!(Dataset::new(vec![1.0, f64::NAN], 1).is_err());
        let d = Dataset::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.y(1), &[3.0, 4.0]);
    }
}
