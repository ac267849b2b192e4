use nalgebra::DMatrix;

use super::{diag_logpdf, diag_sample, ProposalFamily, ProposalParams};
use crate::error::{Error, Result};
use crate::linalg::{mat_t_vec_acc, mat_vec};
use crate::models::StateSpaceModel;

/// Parameters of one step of [`PerStepAffineDiagonal`].
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStep {
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// `r(x_t | x_{t-1}; λ) = N(x_t; μ_t + diag(β_t) A x_{t-1}, diag(σ²_t))`.
///
/// `A` is a fixed copy of the model's transition matrix. At the first step
/// the `x_{t-1}` term is absent and `β_1` is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct PerStepAffineDiagonal {
    a: DMatrix<f64>,
    horizon: usize,
}

impl PerStepAffineDiagonal {
    pub fn new(a: DMatrix<f64>, horizon: usize) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(Error::Dimension("A must be square and non-empty".into()));
        }
        Ok(Self { a, horizon })
    }

    /// A family whose `A` is zero, i.e. the proposal ignores `x_{t-1}`.
    pub fn independent(dim: usize, horizon: usize) -> Self {
        Self {
            a: DMatrix::zeros(dim, dim),
            horizon,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn offset(&self, t: usize) -> usize {
        3 * self.dim() * t
    }

    pub fn encode(&self, steps: &[AffineStep]) -> Result<ProposalParams> {
        let d = self.dim();
        if steps.len() != self.horizon {
            return Err(Error::Dimension(format!("expected {} steps", self.horizon)));
        }
        let mut v = Vec::with_capacity(3 * d * self.horizon);
        for s in steps {
            if s.mu.len() != d || s.beta.len() != d || s.log_var.len() != d {
                return Err(Error::Dimension(format!("step vectors must have length {d}")));
            }
            v.extend_from_slice(&s.mu);
            v.extend_from_slice(&s.beta);
            v.extend_from_slice(&s.log_var);
        }
        Ok(ProposalParams(v))
    }

    pub fn decode(&self, params: &ProposalParams) -> Result<Vec<AffineStep>> {
        let d = self.dim();
        if params.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        Ok(params
            .0
            .chunks_exact(3 * d)
            .map(|c| AffineStep {
                mu: c[..d].to_vec(),
                beta: c[d..2 * d].to_vec(),
                log_var: c[2 * d..].to_vec(),
            })
            .collect())
    }

    /// `μ_1` = the initial mean, later `μ_t = 0`, `β = 1`, `σ²` = the model's own transition variances, so the
    /// proposal starts at the bootstrap filter when the transition covariance
    /// is diagonal. Off-diagonal covariance is dropped.
    pub fn prior_init(&self, model: &dyn StateSpaceModel) -> Result<ProposalParams> {
        let d = self.dim();
        let mut steps = Vec::with_capacity(self.horizon);
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        let zeros = vec![0.0; d];
        for t in 0..self.horizon {
            let prev = (t > 0).then_some(zeros.as_slice());
            if !model.diag_gaussian_transition(prev, &mut mean, &mut var) {
                return Err(Error::InvalidArgument(
                    "prior initialization needs a diagonal Gaussian transition".into(),
                ));
            }
            steps.push(AffineStep {
                mu: if t == 0 { mean.clone() } else { vec![0.0; d] },
                beta: vec![1.0; d],
                log_var: var.iter().map(|v| v.ln()).collect(),
            });
        }
        self.encode(&steps)
    }

    fn moments(&self, params: &[f64], t: usize, x_prev: Option<&[f64]>, mean: &mut [f64], std: &mut [f64]) {
        let d = self.dim();
        let o = self.offset(t);
        let (mu, beta, lv) = (&params[o..o + d], &params[o + d..o + 2 * d], &params[o + 2 * d..o + 3 * d]);
        match x_prev {
            Some(xp) if t > 0 => {
                mat_vec(&self.a, xp, mean);
                for k in 0..d {
                    mean[k] = mu[k] + beta[k] * mean[k];
                }
            }
            _ => mean.copy_from_slice(mu),
        }
        for k in 0..d {
            std[k] = (0.5 * lv[k]).exp();
        }
    }
}

impl ProposalFamily for PerStepAffineDiagonal {
    fn name(&self) -> &'static str {
        "per_step_affine"
    }
    fn state_dim(&self) -> usize {
        self.dim()
    }
    fn num_params(&self) -> usize {
        3 * self.dim() * self.horizon
    }
    fn check(&self, model: &dyn StateSpaceModel, horizon: usize) -> Result<()> {
        if model.state_dim() != self.dim() {
            return Err(Error::Dimension("proposal and model state sizes differ".into()));
        }
        if horizon > self.horizon {
            return Err(Error::Dimension(format!(
                "proposal has {} steps, data has {horizon}",
                self.horizon
            )));
        }
        Ok(())
    }
    fn sample(
        &self,
        _model: &dyn StateSpaceModel,
        params: &[f64],
        t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        eps: &[f64],
        out: &mut [f64],
    ) {
        let d = self.dim();
        let mut std = vec![0.0; d];
        self.moments(params, t, x_prev, out, &mut std);
        let mean = out.to_vec();
        diag_sample(&mean, &std, eps, out);
    }
    fn log_density(
        &self,
        _model: &dyn StateSpaceModel,
        params: &[f64],
        t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        x: &[f64],
    ) -> f64 {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        self.moments(params, t, x_prev, &mut mean, &mut std);
        diag_logpdf(&mean, &std, x)
    }
    fn diag_gaussian(
        &self,
        _model: &dyn StateSpaceModel,
        params: &[f64],
        t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        mean: &mut [f64],
        std: &mut [f64],
    ) -> bool {
        self.moments(params, t, x_prev, mean, std);
        true
    }
    fn diag_gaussian_vjp(
        &self,
        _model: &dyn StateSpaceModel,
        params: &[f64],
        t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        v_mean: &[f64],
        v_std: &[f64],
        gx_prev: Option<&mut [f64]>,
        glambda: &mut [f64],
        _gtheta: Option<&mut [f64]>,
    ) {
        let d = self.dim();
        let o = self.offset(t);
        for k in 0..d {
            glambda[o + k] += v_mean[k];
            let s = (0.5 * params[o + 2 * d + k]).exp();
            glambda[o + 2 * d + k] += v_std[k] * 0.5 * s;
        }
        if let Some(xp) = x_prev.filter(|_| t > 0) {
            let mut ax = vec![0.0; d];
            mat_vec(&self.a, xp, &mut ax);
            let beta = &params[o + d..o + 2 * d];
            let mut bv = vec![0.0; d];
            for k in 0..d {
                glambda[o + d + k] += v_mean[k] * ax[k];
                bv[k] = beta[k] * v_mean[k];
            }
            if let Some(g) = gx_prev {
                mat_t_vec_acc(&self.a, &bv, 1.0, g);
            }
        }
    }
}
