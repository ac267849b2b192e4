use super::{diag_logpdf, ProposalFamily};
use crate::error::{Error, Result};
use crate::models::StateSpaceModel;

/// `r(x_t | x_{t-1}; λ) = N(x_t; λ + 0.5 x_{t-1}, 1)` with `x_0 ≡ 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScalarMeanShift;

impl ScalarMeanShift {
    pub fn params(lambda: f64) -> super::ProposalParams {
        super::ProposalParams(vec![lambda])
    }

    fn mean(params: &[f64], x_prev: Option<&[f64]>) -> f64 {
        params[0] + 0.5 * x_prev.map_or(0.0, |x| x[0])
    }
}

impl ProposalFamily for ScalarMeanShift {
    fn name(&self) -> &'static str {
        "scalar_mean_shift"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn num_params(&self) -> usize {
        1
    }
    fn check(&self, model: &dyn StateSpaceModel, _horizon: usize) -> Result<()> {
        if model.state_dim() != 1 {
            return Err(Error::Dimension("scalar proposal needs a scalar state".into()));
        }
        Ok(())
    }
    fn sample(
        &self,
        _model: &dyn StateSpaceModel,
        params: &[f64],
        _t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        eps: &[f64],
        out: &mut [f64],
    ) {
        out[0] = Self::mean(params, x_prev) + eps[0];
    }
    fn log_density(
        &self,
        _model: &dyn StateSpaceModel,
        params: &[f64],
        _t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        x: &[f64],
    ) -> f64 {
        diag_logpdf(&[Self::mean(params, x_prev)], &[1.0], x)
    }
    fn diag_gaussian(
        &self,
        _model: &dyn StateSpaceModel,
        params: &[f64],
        _t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        mean: &mut [f64],
        std: &mut [f64],
    ) -> bool {
        mean[0] = Self::mean(params, x_prev);
        std[0] = 1.0;
        true
    }
    fn diag_gaussian_vjp(
        &self,
        _model: &dyn StateSpaceModel,
        _params: &[f64],
        _t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        v_mean: &[f64],
        _v_std: &[f64],
        gx_prev: Option<&mut [f64]>,
        glambda: &mut [f64],
        _gtheta: Option<&mut [f64]>,
    ) {
        glambda[0] += v_mean[0];
        if let (Some(_), Some(g)) = (x_prev, gx_prev) {
            g[0] += 0.5 * v_mean[0];
        }
    }
}
