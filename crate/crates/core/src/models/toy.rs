//! Fixed toy models with one-dimensional grid oracles.

use super::{grid_log_normalizer, linspace, Dataset, StateSpaceModel};
use crate::error::{Error, Result};
use crate::linalg::normal_logpdf;

/// `p(x_{1:T}, y_{1:T}) = Π N(x_t; 0, 1) N(y_t; x_t², 1)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ToyQuadraticModel;

impl ToyQuadraticModel {
    /// `log p(y_{1:T})` as a sum of per-step grid integrals.
    pub fn log_marginal(&self, data: &Dataset) -> Result<f64> {
        let grid = linspace(-12.0, 12.0, 24_001);
        data.rows()
            .map(|y| grid_log_normalizer(|x| self.log_joint_step(x, y[0]), &grid))
            .sum()
    }

    fn log_joint_step(&self, x: f64, y: f64) -> f64 {
        normal_logpdf(x, 0.0, 1.0) + normal_logpdf(y, x * x, 1.0)
    }
}

fn no_theta(theta: &[f64]) -> Result<()> {
    if theta.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument("model has no learnable parameters".into()))
    }
}

impl StateSpaceModel for ToyQuadraticModel {
    fn name(&self) -> &'static str {
        "toy_quadratic"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn log_transition(&self, _x_prev: Option<&[f64]>, x: &[f64]) -> f64 {
        normal_logpdf(x[0], 0.0, 1.0)
    }
    fn log_observation(&self, x: &[f64], y: &[f64]) -> f64 {
        normal_logpdf(y[0], x[0] * x[0], 1.0)
    }
    fn transition_from_noise(&self, _x_prev: Option<&[f64]>, eps: &[f64], out: &mut [f64]) {
        out[0] = eps[0];
    }
    fn observation_from_noise(&self, x: &[f64], eps: &[f64], out: &mut [f64]) {
        out[0] = x[0] * x[0] + eps[0];
    }
    fn with_theta(&self, theta: &[f64]) -> Result<Box<dyn StateSpaceModel>> {
        no_theta(theta)?;
        Ok(Box::new(*self))
    }
    fn grad_log_transition(
        &self,
        _x_prev: Option<&[f64]>,
        x: &[f64],
        coeff: f64,
        gx: &mut [f64],
        _gx_prev: Option<&mut [f64]>,
        _gtheta: Option<&mut [f64]>,
    ) {
        gx[0] -= coeff * x[0];
    }
    fn grad_log_observation(
        &self,
        x: &[f64],
        y: &[f64],
        coeff: f64,
        gx: &mut [f64],
        _gtheta: Option<&mut [f64]>,
    ) {
        gx[0] += coeff * 2.0 * x[0] * (y[0] - x[0] * x[0]);
    }
    fn diag_gaussian_transition(
        &self,
        _x_prev: Option<&[f64]>,
        mean: &mut [f64],
        var: &mut [f64],
    ) -> bool {
        mean[0] = 0.0;
        var[0] = 1.0;
        true
    }
}

/// Single-step model with posterior `∝ N(x; 0, 1) N(y; x²/2, e^{x/2})`
/// (the second argument is a variance).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BimodalModel;

impl BimodalModel {
    pub fn log_joint(&self, x: f64, y: f64) -> f64 {
        normal_logpdf(x, 0.0, 1.0) + self.log_obs(x, y)
    }

    fn log_obs(&self, x: f64, y: f64) -> f64 {
        normal_logpdf(y, 0.5 * x * x, (0.5 * x).exp())
    }
}

impl StateSpaceModel for BimodalModel {
    fn name(&self) -> &'static str {
        "bimodal"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn log_transition(&self, _x_prev: Option<&[f64]>, x: &[f64]) -> f64 {
        normal_logpdf(x[0], 0.0, 1.0)
    }
    fn log_observation(&self, x: &[f64], y: &[f64]) -> f64 {
        self.log_obs(x[0], y[0])
    }
    fn transition_from_noise(&self, _x_prev: Option<&[f64]>, eps: &[f64], out: &mut [f64]) {
        out[0] = eps[0];
    }
    fn observation_from_noise(&self, x: &[f64], eps: &[f64], out: &mut [f64]) {
        out[0] = 0.5 * x[0] * x[0] + (0.25 * x[0]).exp() * eps[0];
    }
    fn with_theta(&self, theta: &[f64]) -> Result<Box<dyn StateSpaceModel>> {
        no_theta(theta)?;
        Ok(Box::new(*self))
    }
    fn grad_log_transition(
        &self,
        _x_prev: Option<&[f64]>,
        x: &[f64],
        coeff: f64,
        gx: &mut [f64],
        _gx_prev: Option<&mut [f64]>,
        _gtheta: Option<&mut [f64]>,
    ) {
        gx[0] -= coeff * x[0];
    }
    fn grad_log_observation(
        &self,
        x: &[f64],
        y: &[f64],
        coeff: f64,
        gx: &mut [f64],
        _gtheta: Option<&mut [f64]>,
    ) {
        let x = x[0];
        let r = y[0] - 0.5 * x * x;
        let prec = (-0.5 * x).exp();
        gx[0] += coeff * (-0.25 + x * r * prec + 0.25 * r * r * prec);
    }
    fn diag_gaussian_transition(
        &self,
        _x_prev: Option<&[f64]>,
        mean: &mut [f64],
        var: &mut [f64],
    ) -> bool {
        mean[0] = 0.0;
        var[0] = 1.0;
        true
    }
}
