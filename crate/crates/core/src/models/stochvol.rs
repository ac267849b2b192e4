//! Multivariate stochastic volatility with element-wise dynamics.
//!
//! `x_t = mu + phi (x_{t-1} - mu) + v_t`, `y_t = beta exp(x_t / 2) e_t`,
//! `v_t ~ N(0, diag(q))`, `e_t ~ N(0, I)`, `x_1 ~ N(mu, diag(q))`.
//!
//! The flat parameter vector is `[mu (d), atanh(phi) (d), log q (d), log beta (d)]`,
//! so unconstrained ascent keeps `|phi| < 1`, `q > 0` and `beta > 0`.

use super::StateSpaceModel;
use crate::error::{Error, Result};
use crate::linalg::{normal_logpdf, LN_2PI};

#[derive(Debug, Clone, PartialEq)]
pub struct StochVolModel {
    mu: Vec<f64>,
    phi: Vec<f64>,
    q: Vec<f64>,
    beta: Vec<f64>,
}

impl StochVolModel {
    pub fn new(mu: Vec<f64>, phi: Vec<f64>, q: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 || phi.len() != d || q.len() != d || beta.len() != d {
            return Err(Error::Dimension("mu, phi, q and beta must share one length".into()));
        }
        if phi.iter().any(|p| !(p.abs() < 1.0)) {
            return Err(Error::InvalidArgument("phi must lie in (-1, 1)".into()));
        }
        if q.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::NotPositiveDefinite("Q"));
        }
        if beta.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument("beta must be positive".into()));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("mu must be finite".into()));
        }
        Ok(Self { mu, phi, q, beta })
    }

    /// The same scalar parameters in every coordinate.
    pub fn isotropic(d: usize, mu: f64, phi: f64, q: f64, beta: f64) -> Result<Self> {
        Self::new(vec![mu; d], vec![phi; d], vec![q; d], vec![beta; d])
    }

    pub fn from_theta(theta: &[f64]) -> Result<Self> {
        if theta.is_empty() || !theta.len().is_multiple_of(4) {
            return Err(Error::Dimension("theta length must be a positive multiple of 4".into()));
        }
        let d = theta.len() / 4;
        let part = |k: usize| &theta[k * d..(k + 1) * d];
        Self::new(
            part(0).to_vec(),
            part(1).iter().map(|v| v.tanh()).collect(),
            part(2).iter().map(|v| v.exp()).collect(),
            part(3).iter().map(|v| v.exp()).collect(),
        )
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }
    pub fn phi(&self) -> &[f64] {
        &self.phi
    }
    pub fn q(&self) -> &[f64] {
        &self.q
    }
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    #[inline]
    fn mean_k(&self, k: usize, x_prev: Option<&[f64]>) -> f64 {
        match x_prev {
            Some(xp) => self.mu[k] + self.phi[k] * (xp[k] - self.mu[k]),
            None => self.mu[k],
        }
    }
}

impl StateSpaceModel for StochVolModel {
    fn name(&self) -> &'static str {
        "stochvol"
    }
    fn state_dim(&self) -> usize {
        self.mu.len()
    }
    fn obs_dim(&self) -> usize {
        self.mu.len()
    }

    fn log_transition(&self, x_prev: Option<&[f64]>, x: &[f64]) -> f64 {
        (0..x.len())
            .map(|k| normal_logpdf(x[k], self.mean_k(k, x_prev), self.q[k]))
            .sum()
    }

    fn log_observation(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..x.len())
            .map(|k| {
                let b2 = self.beta[k] * self.beta[k];
                -0.5 * (LN_2PI + b2.ln() + x[k] + y[k] * y[k] * (-x[k]).exp() / b2)
            })
            .sum()
    }

    fn transition_from_noise(&self, x_prev: Option<&[f64]>, eps: &[f64], out: &mut [f64]) {
        for k in 0..out.len() {
            out[k] = self.mean_k(k, x_prev) + self.q[k].sqrt() * eps[k];
        }
    }

    fn observation_from_noise(&self, x: &[f64], eps: &[f64], out: &mut [f64]) {
        for k in 0..out.len() {
            out[k] = self.beta[k] * (0.5 * x[k]).exp() * eps[k];
        }
    }

    fn num_theta(&self) -> usize {
        4 * self.mu.len()
    }

    fn theta(&self) -> Vec<f64> {
        let mut t = self.mu.clone();
        t.extend(self.phi.iter().map(|p| p.atanh()));
        t.extend(self.q.iter().map(|v| v.ln()));
        t.extend(self.beta.iter().map(|v| v.ln()));
        t
    }

    fn with_theta(&self, theta: &[f64]) -> Result<Box<dyn StateSpaceModel>> {
        if theta.len() != self.num_theta() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_theta(),
                theta.len()
            )));
        }
        Ok(Box::new(Self::from_theta(theta)?))
    }

    fn grad_log_transition(
        &self,
        x_prev: Option<&[f64]>,
        x: &[f64],
        coeff: f64,
        gx: &mut [f64],
        mut gx_prev: Option<&mut [f64]>,
        mut gtheta: Option<&mut [f64]>,
    ) {
        let d = x.len();
        for k in 0..d {
            let resid = x[k] - self.mean_k(k, x_prev);
            let r = resid / self.q[k];
            gx[k] -= coeff * r;
            if let (Some(xp), Some(gp)) = (x_prev, gx_prev.as_deref_mut()) {
                let _ = xp;
                gp[k] += coeff * r * self.phi[k];
            }
            if let Some(gt) = gtheta.as_deref_mut() {
                match x_prev {
                    Some(xp) => {
                        gt[k] += coeff * r * (1.0 - self.phi[k]);
                        let dphi = 1.0 - self.phi[k] * self.phi[k];
                        gt[d + k] += coeff * r * (xp[k] - self.mu[k]) * dphi;
                    }
                    None => gt[k] += coeff * r,
                }
                gt[2 * d + k] += coeff * (-0.5 + 0.5 * resid * r);
            }
        }
    }

    fn grad_log_observation(
        &self,
        x: &[f64],
        y: &[f64],
        coeff: f64,
        gx: &mut [f64],
        mut gtheta: Option<&mut [f64]>,
    ) {
        let d = x.len();
        for k in 0..d {
            let s = y[k] * y[k] * (-x[k]).exp() / (self.beta[k] * self.beta[k]);
            gx[k] += coeff * (-0.5 + 0.5 * s);
            if let Some(gt) = gtheta.as_deref_mut() {
                gt[3 * d + k] += coeff * (-1.0 + s);
            }
        }
    }

    fn diag_gaussian_transition(
        &self,
        x_prev: Option<&[f64]>,
        mean: &mut [f64],
        var: &mut [f64],
    ) -> bool {
        for k in 0..mean.len() {
            mean[k] = self.mean_k(k, x_prev);
            var[k] = self.q[k];
        }
        true
    }

    fn diag_gaussian_transition_vjp(
        &self,
        x_prev: Option<&[f64]>,
        v_mean: &[f64],
        v_var: &[f64],
        mut gx_prev: Option<&mut [f64]>,
        mut gtheta: Option<&mut [f64]>,
    ) {
        let d = v_mean.len();
        for k in 0..d {
            if let (Some(_), Some(gp)) = (x_prev, gx_prev.as_deref_mut()) {
                gp[k] += v_mean[k] * self.phi[k];
            }
            if let Some(gt) = gtheta.as_deref_mut() {
                match x_prev {
                    Some(xp) => {
                        gt[k] += v_mean[k] * (1.0 - self.phi[k]);
                        let dphi = 1.0 - self.phi[k] * self.phi[k];
                        gt[d + k] += v_mean[k] * (xp[k] - self.mu[k]) * dphi;
                    }
                    None => gt[k] += v_mean[k],
                }
                gt[2 * d + k] += v_var[k] * self.q[k];
            }
        }
    }
}
