//! Reparameterizable proposal families `r(x_t | x_{t-1}; λ)`.
//!
//! Every differentiable family here is a diagonal Gaussian,
//! `x_t = m(x_{t-1}; λ, θ) + s(λ, θ) ⊙ ε_t` with `ε_t ~ N(0, I)`, and exposes
//! the vector-Jacobian product of `(x_prev, λ, θ) ↦ (m, s)`. All pathwise
//! gradients in the crate are assembled from that one primitive.
//!
//! Time indices are 0-based: `t = 0` is the first step, where `x_prev` is
//! `None`.
//!
//! # Flat parameter layout
//!
//! | family | layout |
//! |---|---|
//! | [`ScalarMeanShift`] | `[λ]` |
//! | [`PerStepAffineDiagonal`] | for each step `t`: `[μ_t (d), β_t (d), log σ²_t (d)]` |
//! | [`PriorTiltedGaussian`] | for each step `t`: `[μ_t (d), log diag Σ_t (d)]` |
//! | [`BootstrapProposal`], [`LgssmOptimalProposal`] | empty |

mod affine;
mod fixed;
mod scalar;
mod tilted;

pub use affine::{AffineStep, PerStepAffineDiagonal};
pub use fixed::{BootstrapProposal, LgssmOptimalProposal};
pub use scalar::ScalarMeanShift;
pub use tilted::{PriorTiltedGaussian, TiltStep};

use crate::error::{Error, Result};
use crate::linalg::LN_2PI;
use crate::models::StateSpaceModel;

/// Flat variational parameter vector `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalParams(pub Vec<f64>);

impl ProposalParams {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for ProposalParams {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub trait ProposalFamily: std::fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn num_params(&self) -> usize;

    /// Rejects model or horizon mismatches before a sweep starts.
    fn check(&self, model: &dyn StateSpaceModel, horizon: usize) -> Result<()>;

    /// `x = h(x_prev, ε; λ)`.
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        model: &dyn StateSpaceModel,
        params: &[f64],
        t: usize,
        y: &[f64],
        x_prev: Option<&[f64]>,
        eps: &[f64],
        out: &mut [f64],
    );

    #[allow(clippy::too_many_arguments)]
    fn log_density(
        &self,
        model: &dyn StateSpaceModel,
        params: &[f64],
        t: usize,
        y: &[f64],
        x_prev: Option<&[f64]>,
        x: &[f64],
    ) -> f64;

    /// Writes the diagonal-Gaussian mean and standard deviation; `false`
    /// when the family has no analytic gradients for this model.
    #[allow(clippy::too_many_arguments)]
    fn diag_gaussian(
        &self,
        _model: &dyn StateSpaceModel,
        _params: &[f64],
        _t: usize,
        _y: &[f64],
        _x_prev: Option<&[f64]>,
        _mean: &mut [f64],
        _std: &mut [f64],
    ) -> bool {
        false
    }

    /// Accumulates the VJP of `(x_prev, λ, θ) ↦ (mean, std)` with cotangents
    /// `(v_mean, v_std)`.
    #[allow(clippy::too_many_arguments)]
    fn diag_gaussian_vjp(
        &self,
        _model: &dyn StateSpaceModel,
        _params: &[f64],
        _t: usize,
        _y: &[f64],
        _x_prev: Option<&[f64]>,
        _v_mean: &[f64],
        _v_std: &[f64],
        _gx_prev: Option<&mut [f64]>,
        _glambda: &mut [f64],
        _gtheta: Option<&mut [f64]>,
    ) {
    }
}

pub(crate) fn diag_sample(mean: &[f64], std: &[f64], eps: &[f64], out: &mut [f64]) {
    for k in 0..out.len() {
        out[k] = mean[k] + std[k] * eps[k];
    }
}

pub(crate) fn diag_logpdf(mean: &[f64], std: &[f64], x: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..x.len() {
        let z = (x[k] - mean[k]) / std[k];
        total -= 0.5 * (LN_2PI + z * z) + std[k].ln();
    }
    total
}

fn unsupported(model: &dyn StateSpaceModel, family: &dyn ProposalFamily) -> Error {
    Error::UnsupportedPair {
        family: family.name().into(),
        model: model.name().into(),
    }
}

/// `x_t = h(x_{t-1}, ε_t; λ)`.
#[allow(clippy::too_many_arguments)]
pub fn reparameterize(
    model: &dyn StateSpaceModel,
    family: &dyn ProposalFamily,
    params: &[f64],
    t: usize,
    y: &[f64],
    x_prev: Option<&[f64]>,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let d = family.state_dim();
    if eps.len() != d || x_prev.is_some_and(|x| x.len() != d) {
        return Err(Error::Dimension(format!("noise and state must have length {d}")));
    }
    let mut out = vec![0.0; d];
    family.sample(model, params, t, y, x_prev, eps, &mut out);
    Ok(out)
}

/// `log f(x_t | x_{t-1}) + log g(y_t | x_t) - log r(x_t | x_{t-1}; λ)`.
#[allow(clippy::too_many_arguments)]
pub fn incremental_log_weight(
    model: &dyn StateSpaceModel,
    family: &dyn ProposalFamily,
    params: &[f64],
    t: usize,
    y: &[f64],
    x_prev: Option<&[f64]>,
    x: &[f64],
) -> Result<f64> {
    let lf = model.log_transition(x_prev, x);
    if lf.is_nan() {
        return Err(Error::NanDensity { component: "transition", t });
    }
    let lg = model.log_observation(x, y);
    if lg.is_nan() {
        return Err(Error::NanDensity { component: "observation", t });
    }
    let lr = family.log_density(model, params, t, y, x_prev, x);
    if lr.is_nan() {
        return Err(Error::NanDensity { component: "proposal", t });
    }
    // f - r first so that r == f cancels exactly
    Ok((lf - lr) + lg)
}

/// Scratch buffers for [`step_vjp`].
#[derive(Debug, Clone)]
pub(crate) struct StepScratch {
    mean: Vec<f64>,
    std: Vec<f64>,
    gx: Vec<f64>,
    vs: Vec<f64>,
}

impl StepScratch {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![0.0; d],
            gx: vec![0.0; d],
            vs: vec![0.0; d],
        }
    }
}

/// VJP of one proposal step `(x_prev, λ, θ) ↦ (x_t, ℓ_t)` where
/// `x_t = h(x_prev, ε; λ, θ)` and `ℓ_t` is the incremental log-weight at
/// `x_t`, with cotangent `adj_x` on `x_t` and `coeff` on `ℓ_t`.
///
/// `x` must be the family's own sample for `eps`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_vjp(
    model: &dyn StateSpaceModel,
    family: &dyn ProposalFamily,
    params: &[f64],
    t: usize,
    y: &[f64],
    x_prev: Option<&[f64]>,
    eps: &[f64],
    x: &[f64],
    coeff: f64,
    adj_x: Option<&[f64]>,
    mut gx_prev: Option<&mut [f64]>,
    glambda: &mut [f64],
    mut gtheta: Option<&mut [f64]>,
    scratch: &mut StepScratch,
) -> Result<()> {
    let StepScratch { mean, std, gx, vs } = scratch;
    if !family.diag_gaussian(model, params, t, y, x_prev, mean, std) {
        return Err(unsupported(model, family));
    }
    match adj_x {
        Some(a) => gx.copy_from_slice(a),
        None => gx.fill(0.0),
    }
    if coeff != 0.0 {
        model.grad_log_transition(
            x_prev,
            x,
            coeff,
            gx,
            gx_prev.as_deref_mut(),
            gtheta.as_deref_mut(),
        );
        model.grad_log_observation(x, y, coeff, gx, gtheta.as_deref_mut());
    }
    // x is the family's own sample, so along the path
    // -log r(x) = Σ log s + const: only the 1/s term survives.
    for k in 0..gx.len() {
        vs[k] = gx[k] * eps[k] + coeff / std[k];
    }
    family.diag_gaussian_vjp(model, params, t, y, x_prev, gx, vs, gx_prev, glambda, gtheta);
    Ok(())
}

/// Explicit gradient of `log r(x | x_prev; λ, θ)` in `(λ, θ)` at fixed `x`
/// (the score used by score-function estimators).
#[allow(clippy::too_many_arguments)]
pub fn grad_log_proposal_params(
    model: &dyn StateSpaceModel,
    family: &dyn ProposalFamily,
    params: &[f64],
    t: usize,
    y: &[f64],
    x_prev: Option<&[f64]>,
    x: &[f64],
    glambda: &mut [f64],
    gtheta: Option<&mut [f64]>,
) -> Result<()> {
    let d = family.state_dim();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    if !family.diag_gaussian(model, params, t, y, x_prev, &mut mean, &mut std) {
        return Err(unsupported(model, family));
    }
    let mut vm = vec![0.0; d];
    let mut vs = vec![0.0; d];
    for k in 0..d {
        let z = (x[k] - mean[k]) / std[k];
        vm[k] = z / std[k];
        vs[k] = (z * z - 1.0) / std[k];
    }
    family.diag_gaussian_vjp(model, params, t, y, x_prev, &vm, &vs, None, glambda, gtheta);
    Ok(())
}

/// Row-major `state_dim × (n_lambda + n_theta)` Jacobian `∂x_t / ∂(λ, θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    pub dim: usize,
    pub n_lambda: usize,
    pub n_theta: usize,
    pub data: Vec<f64>,
}

impl Sensitivity {
    pub fn zeros(dim: usize, n_lambda: usize, n_theta: usize) -> Self {
        Self {
            dim,
            n_lambda,
            n_theta,
            data: vec![0.0; dim * (n_lambda + n_theta)],
        }
    }

    pub fn width(&self) -> usize {
        self.n_lambda + self.n_theta
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.width();
        &self.data[k * w..(k + 1) * w]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        let w = self.width();
        &mut self.data[k * w..(k + 1) * w]
    }
}

/// Total derivative of an incremental log-weight, `[∂/∂λ, ∂/∂θ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradient {
    pub lambda: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Forward-mode total derivative of `ℓ_t(h(x_prev, ε; λ, θ))`.
///
/// `sens_prev` is `∂x_prev / ∂(λ, θ)` supplied by the caller (`None` means
/// `x_prev` does not depend on the parameters). Returns the gradient and
/// `∂x_t / ∂(λ, θ)`. θ-columns are present only when `with_theta`.
#[allow(clippy::too_many_arguments)]
pub fn grad_incremental_log_weight(
    model: &dyn StateSpaceModel,
    family: &dyn ProposalFamily,
    params: &[f64],
    t: usize,
    y: &[f64],
    x_prev: Option<&[f64]>,
    eps: &[f64],
    sens_prev: Option<&Sensitivity>,
    with_theta: bool,
) -> Result<(StepGradient, Sensitivity)> {
    let d = family.state_dim();
    let np = family.num_params();
    let nt = if with_theta { model.num_theta() } else { 0 };
    if let Some(s) = sens_prev {
        if s.dim != d || s.n_lambda != np || s.n_theta != nt {
            return Err(Error::Dimension("sensitivity shape does not match".into()));
        }
    }
    let x = reparameterize(model, family, params, t, y, x_prev, eps)?;
    let mut scratch = StepScratch::new(d);
    let mut gl = vec![0.0; np];
    let mut gt = vec![0.0; nt];
    let mut gxp = vec![0.0; d];

    let mut vjp = |coeff: f64, adj: Option<&[f64]>, gl: &mut [f64], gt: &mut [f64], gxp: &mut [f64]| {
        gl.fill(0.0);
        gt.fill(0.0);
        gxp.fill(0.0);
        step_vjp(
            model,
            family,
            params,
            t,
            y,
            x_prev,
            eps,
            &x,
            coeff,
            adj,
            x_prev.map(|_| &mut *gxp),
            gl,
            with_theta.then_some(gt),
            &mut scratch,
        )
    };

    let combine = |local_l: &[f64], local_t: &[f64], dxp: &[f64], out: &mut [f64]| {
        out[..np].copy_from_slice(local_l);
        out[np..].copy_from_slice(local_t);
        if let Some(s) = sens_prev {
            for (j, &c) in dxp.iter().enumerate() {
                if c != 0.0 {
                    for (o, v) in out.iter_mut().zip(s.row(j)) {
                        *o += c * v;
                    }
                }
            }
        }
    };

    let mut grad = vec![0.0; np + nt];
    vjp(1.0, None, &mut gl, &mut gt, &mut gxp)?;
    combine(&gl, &gt, &gxp, &mut grad);

    let mut sens = Sensitivity::zeros(d, np, nt);
    let mut e = vec![0.0; d];
    for k in 0..d {
        e.fill(0.0);
        e[k] = 1.0;
        vjp(0.0, Some(&e), &mut gl, &mut gt, &mut gxp)?;
        combine(&gl, &gt, &gxp, sens.row_mut(k));
    }
    let theta = grad.split_off(np);
    Ok((StepGradient { lambda: grad, theta }, sens))
}
