//! Parameter-free proposals: the bootstrap filter and the locally optimal
//! proposal of the linear-Gaussian model.

use nalgebra::DVector;

use super::ProposalFamily;
use crate::error::{Error, Result};
use crate::linalg::LN_2PI;
use crate::models::{LgssmModel, OptimalStep, StateSpaceModel};

/// `r = f`: proposes from the model's own transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapProposal {
    dim: usize,
}

impl BootstrapProposal {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl ProposalFamily for BootstrapProposal {
    fn name(&self) -> &'static str {
        "bootstrap"
    }
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn num_params(&self) -> usize {
        0
    }
    fn check(&self, model: &dyn StateSpaceModel, _horizon: usize) -> Result<()> {
        if model.state_dim() != self.dim {
            return Err(Error::Dimension("proposal and model state sizes differ".into()));
        }
        Ok(())
    }
    fn sample(
        &self,
        model: &dyn StateSpaceModel,
        _params: &[f64],
        _t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        eps: &[f64],
        out: &mut [f64],
    ) {
        model.transition_from_noise(x_prev, eps, out);
    }
    fn log_density(
        &self,
        model: &dyn StateSpaceModel,
        _params: &[f64],
        _t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        x: &[f64],
    ) -> f64 {
        model.log_transition(x_prev, x)
    }
    fn diag_gaussian(
        &self,
        model: &dyn StateSpaceModel,
        _params: &[f64],
        _t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        mean: &mut [f64],
        std: &mut [f64],
    ) -> bool {
        if !model.diag_gaussian_transition(x_prev, mean, std) {
            return false;
        }
        for s in std.iter_mut() {
            *s = s.sqrt();
        }
        true
    }
    fn diag_gaussian_vjp(
        &self,
        model: &dyn StateSpaceModel,
        _params: &[f64],
        _t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        v_mean: &[f64],
        v_std: &[f64],
        gx_prev: Option<&mut [f64]>,
        _glambda: &mut [f64],
        gtheta: Option<&mut [f64]>,
    ) {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        if !model.diag_gaussian_transition(x_prev, &mut mean, &mut var) {
            return;
        }
        let v_var: Vec<f64> = (0..d).map(|k| v_std[k] * 0.5 / var[k].sqrt()).collect();
        model.diag_gaussian_transition_vjp(x_prev, v_mean, &v_var, gx_prev, gtheta);
    }
}

/// `r ∝ f · g` for a linear-Gaussian model, in closed form.
///
/// The proposal carries its own copy of the model; the model handed to the
/// sweep must have the same dimensions.
#[derive(Debug, Clone)]
pub struct LgssmOptimalProposal {
    model: LgssmModel,
    first: OptimalStep,
    rest: OptimalStep,
}

impl LgssmOptimalProposal {
    pub fn new(model: &LgssmModel) -> Result<Self> {
        Ok(Self {
            model: model.clone(),
            first: OptimalStep::new(model, model.initial().cov())?,
            rest: OptimalStep::new(model, model.q())?,
        })
    }

    fn step(&self, x_prev: Option<&[f64]>) -> &OptimalStep {
        if x_prev.is_some() {
            &self.rest
        } else {
            &self.first
        }
    }

    fn mean(&self, x_prev: Option<&[f64]>, y: &[f64]) -> DVector<f64> {
        let d = self.model.state_dim();
        let mf = match x_prev {
            Some(xp) => self.model.a() * DVector::from_column_slice(xp),
            None => self.model.initial().mean().clone(),
        };
        debug_assert_eq!(mf.len(), d);
        self.step(x_prev).posterior_mean(self.model.c(), &mf, y).0
    }
}

impl ProposalFamily for LgssmOptimalProposal {
    fn name(&self) -> &'static str {
        "lgssm_optimal"
    }
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }
    fn num_params(&self) -> usize {
        0
    }
    fn check(&self, model: &dyn StateSpaceModel, _horizon: usize) -> Result<()> {
        if model.state_dim() != self.state_dim() || model.obs_dim() != self.model.obs_dim() {
            return Err(Error::Dimension("optimal proposal built for another model".into()));
        }
        Ok(())
    }
    fn sample(
        &self,
        _model: &dyn StateSpaceModel,
        _params: &[f64],
        _t: usize,
        y: &[f64],
        x_prev: Option<&[f64]>,
        eps: &[f64],
        out: &mut [f64],
    ) {
        let mean = self.mean(x_prev, y);
        let l = &self.step(x_prev).chol;
        let d = out.len();
        for i in 0..d {
            let mut v = mean[i];
            for j in 0..=i {
                v += l[(i, j)] * eps[j];
            }
            out[i] = v;
        }
    }
    fn log_density(
        &self,
        _model: &dyn StateSpaceModel,
        _params: &[f64],
        _t: usize,
        y: &[f64],
        x_prev: Option<&[f64]>,
        x: &[f64],
    ) -> f64 {
        let mean = self.mean(x_prev, y);
        let step = self.step(x_prev);
        let l = &step.chol;
        let d = x.len();
        let mut z = vec![0.0; d];
        let mut quad = 0.0;
        for i in 0..d {
            let mut v = x[i] - mean[i];
            for j in 0..i {
                v -= l[(i, j)] * z[j];
            }
            v /= l[(i, i)];
            z[i] = v;
            quad += v * v;
        }
        -0.5 * (d as f64 * LN_2PI + step.log_det + quad)
    }
}

