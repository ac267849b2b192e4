use super::{diag_logpdf, diag_sample, ProposalFamily, ProposalParams};
use crate::error::{Error, Result};
use crate::models::StateSpaceModel;

/// Parameters of one step of [`PriorTiltedGaussian`].
#[derive(Debug, Clone, PartialEq)]
pub struct TiltStep {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// `r(x_t | x_{t-1}; λ, θ) ∝ f(x_t | x_{t-1}; θ) N(x_t; μ_t, diag Σ_t)`.
///
/// Needs a model whose transition is Gaussian with diagonal covariance; the
/// product is formed in closed form, coordinate by coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTiltedGaussian {
    dim: usize,
    horizon: usize,
}

impl PriorTiltedGaussian {
    pub fn new(dim: usize, horizon: usize) -> Self {
        Self { dim, horizon }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn offset(&self, t: usize) -> usize {
        2 * self.dim * t
    }

    pub fn encode(&self, steps: &[TiltStep]) -> Result<ProposalParams> {
        if steps.len() != self.horizon {
            return Err(Error::Dimension(format!("expected {} steps", self.horizon)));
        }
        let mut v = Vec::with_capacity(self.num_params());
        for s in steps {
            if s.mu.len() != self.dim || s.log_var.len() != self.dim {
                return Err(Error::Dimension(format!("step vectors must have length {}", self.dim)));
            }
            v.extend_from_slice(&s.mu);
            v.extend_from_slice(&s.log_var);
        }
        Ok(ProposalParams(v))
    }

    pub fn decode(&self, params: &ProposalParams) -> Result<Vec<TiltStep>> {
        if params.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let d = self.dim;
        Ok(params
            .0
            .chunks_exact(2 * d)
            .map(|c| TiltStep {
                mu: c[..d].to_vec(),
                log_var: c[d..].to_vec(),
            })
            .collect())
    }

    /// Every step tilts towards `mu` with variance `var`.
    pub fn uniform_init(&self, mu: f64, var: f64) -> ProposalParams {
        let step = TiltStep {
            mu: vec![mu; self.dim],
            log_var: vec![var.ln(); self.dim],
        };
        self.encode(&vec![step; self.horizon]).expect("consistent shapes")
    }

    /// Per-coordinate moments; `None` if the model transition is not a
    /// diagonal Gaussian.
    fn moments(
        &self,
        model: &dyn StateSpaceModel,
        params: &[f64],
        t: usize,
        x_prev: Option<&[f64]>,
        mean: &mut [f64],
        std: &mut [f64],
    ) -> bool {
        let d = self.dim;
        let mut mf = vec![0.0; d];
        let mut q = vec![0.0; d];
        if !model.diag_gaussian_transition(x_prev, &mut mf, &mut q) {
            return false;
        }
        let o = self.offset(t);
        for k in 0..d {
            let a = 1.0 / q[k];
            let b = (-params[o + d + k]).exp();
            let v = 1.0 / (a + b);
            mean[k] = v * (a * mf[k] + b * params[o + k]);
            std[k] = v.sqrt();
        }
        true
    }
}

impl ProposalFamily for PriorTiltedGaussian {
    fn name(&self) -> &'static str {
        "prior_tilted"
    }
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn num_params(&self) -> usize {
        2 * self.dim * self.horizon
    }
    fn check(&self, model: &dyn StateSpaceModel, horizon: usize) -> Result<()> {
        if model.state_dim() != self.dim {
            return Err(Error::Dimension("proposal and model state sizes differ".into()));
        }
        if horizon > self.horizon {
            return Err(Error::Dimension(format!(
                "proposal has {} steps, data has {horizon}",
                self.horizon
            )));
        }
        let mut m = vec![0.0; self.dim];
        let mut v = vec![0.0; self.dim];
        if !model.diag_gaussian_transition(None, &mut m, &mut v) {
            return Err(Error::UnsupportedPair {
                family: self.name().into(),
                model: model.name().into(),
            });
        }
        Ok(())
    }
    fn sample(
        &self,
        model: &dyn StateSpaceModel,
        params: &[f64],
        t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        eps: &[f64],
        out: &mut [f64],
    ) {
        let mut mean = vec![0.0; self.dim];
        let mut std = vec![0.0; self.dim];
        if self.moments(model, params, t, x_prev, &mut mean, &mut std) {
            diag_sample(&mean, &std, eps, out);
        } else {
            out.fill(f64::NAN);
        }
    }
    fn log_density(
        &self,
        model: &dyn StateSpaceModel,
        params: &[f64],
        t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        x: &[f64],
    ) -> f64 {
        let mut mean = vec![0.0; self.dim];
        let mut std = vec![0.0; self.dim];
        if self.moments(model, params, t, x_prev, &mut mean, &mut std) {
            diag_logpdf(&mean, &std, x)
        } else {
            f64::NAN
        }
    }
    fn diag_gaussian(
        &self,
        model: &dyn StateSpaceModel,
        params: &[f64],
        t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        mean: &mut [f64],
        std: &mut [f64],
    ) -> bool {
        self.moments(model, params, t, x_prev, mean, std)
    }
    fn diag_gaussian_vjp(
        &self,
        model: &dyn StateSpaceModel,
        params: &[f64],
        t: usize,
        _y: &[f64],
        x_prev: Option<&[f64]>,
        v_mean: &[f64],
        v_std: &[f64],
        gx_prev: Option<&mut [f64]>,
        glambda: &mut [f64],
        gtheta: Option<&mut [f64]>,
    ) {
        let d = self.dim;
        let mut mf = vec![0.0; d];
        let mut q = vec![0.0; d];
        if !model.diag_gaussian_transition(x_prev, &mut mf, &mut q) {
            return;
        }
        let o = self.offset(t);
        let mut vmf = vec![0.0; d];
        let mut vq = vec![0.0; d];
        for k in 0..d {
            let mu = params[o + k];
            let a = 1.0 / q[k];
            let b = (-params[o + d + k]).exp();
            let v = 1.0 / (a + b);
            let m = v * (a * mf[k] + b * mu);
            let s = v.sqrt();
            let dstd_dv = 0.5 / s;
            glambda[o + k] += v_mean[k] * v * b;
            glambda[o + d + k] +=
                v_mean[k] * (-b * v * (mu - m)) + v_std[k] * dstd_dv * v * v * b;
            vmf[k] = v_mean[k] * v * a;
            vq[k] = v_mean[k] * (-a * a * v * (mf[k] - m)) + v_std[k] * dstd_dv * v * v * a * a;
        }
        model.diag_gaussian_transition_vjp(x_prev, &vmf, &vq, gx_prev, gtheta);
    }
}
