//! Estimators of the surrogate ELBO `L̃(λ) = E[log Ẑ]` and its gradient.
//!
//! The gradient splits into a pathwise part with the resampling indices held
//! fixed (`g_rep`) and a score part for the indices (`g_score`). Every
//! estimator that uses reparameterized particles is a weighted sum of the
//! total derivatives of the incremental log-weights `ℓ_t^i`, so all of them
//! are computed by one reverse pass over the sweep with per-`(t, i)`
//! coefficients ([`reverse_sweep`]).

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::models::{Dataset, StateSpaceModel};
use crate::proposals::{grad_incremental_log_weight, grad_log_proposal_params, step_vjp, ProposalFamily, Sensitivity, StepScratch};
use crate::rng::stream_rng;
use crate::smc::{run_smc, run_with_ancestors, ResamplingMode, SmcRunResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorTag {
    /// Pathwise term only, resampling treated as constant.
    RepOnly,
    /// Pathwise term plus the Rao-Blackwellized ancestor score term.
    RepPlusScoreRB,
    /// Score-function estimator with no reparameterization.
    ScoreFull,
    /// Pathwise term plus the leave-one-out ancestor term (`T = 2`).
    LeaveOneOutT2,
    FiniteDifference,
}

impl EstimatorTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RepOnly => "rep_only",
            Self::RepPlusScoreRB => "rep_plus_score_rb",
            Self::ScoreFull => "score_full",
            Self::LeaveOneOutT2 => "leave_one_out_t2",
            Self::FiniteDifference => "finite_difference",
        }
    }
}

impl std::str::FromStr for EstimatorTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Self::RepOnly,
            Self::RepPlusScoreRB,
            Self::ScoreFull,
            Self::LeaveOneOutT2,
            Self::FiniteDifference,
        ]
        .into_iter()
        .find(|t| t.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// `log Ẑ` of the sweep the gradient was computed on.
    pub elbo_hat: f64,
    pub grad_lambda: Vec<f64>,
    pub grad_theta: Option<Vec<f64>>,
    pub tag: EstimatorTag,
}

/// Baselines `c_t` subtracted from the reward multiplying the ancestor score
/// of step `t`.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlVariateState {
    Disabled,
    Fixed(Vec<f64>),
    /// Exponential moving average of the observed rewards, updated after
    /// each use and initialized from the first sweep.
    Ema { decay: f64, values: Option<Vec<f64>> },
}

impl ControlVariateState {
    pub fn ema() -> Self {
        Self::Ema { decay: 0.9, values: None }
    }

    /// Current baselines for a horizon of `horizon` steps (entry `t` is for
    /// the ancestors drawn before step `t`; entry 0 is unused).
    pub fn values(&self, horizon: usize) -> Vec<f64> {
        match self {
            Self::Disabled => vec![0.0; horizon],
            Self::Fixed(v) => v.clone(),
            Self::Ema { values, .. } => values.clone().unwrap_or_else(|| vec![0.0; horizon]),
        }
    }

    fn prepare(&mut self, rewards: &[f64]) {
        if let Self::Ema { values: v @ None, .. } = self {
            *v = Some(rewards.to_vec());
        }
    }

    fn update(&mut self, rewards: &[f64]) {
        if let Self::Ema { decay, values: Some(v) } = self {
            for (c, r) in v.iter_mut().zip(rewards) {
                *c = *decay * *c + (1.0 - *decay) * r;
            }
        }
    }
}

/// `R_t = Σ_{s ≥ t} log((1/N) Σᵢ w_s^i) = log(Ẑ_T / Ẑ_{t-1})`.
pub fn future_rewards(run: &SmcRunResult) -> Vec<f64> {
    let terms = &run.system.log_z_terms;
    let mut out = vec![0.0; terms.len()];
    let mut acc = 0.0;
    for t in (0..terms.len()).rev() {
        acc += terms[t];
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

/// Mean and standard error of `log Ẑ` over sweeps seeded
/// `stream_rng(seed, k)`, `k < n_seeds`.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_elbo(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    num_particles: usize,
    mode: ResamplingMode,
    n_seeds: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    if n_seeds == 0 {
        return Err(Error::InvalidArgument("n_seeds must be at least 1".into()));
    }
    let values = (0..n_seeds as u64)
        .map(|k| run_smc(model, data, family, params, num_particles, mode, &mut stream_rng(seed, k)).map(|r| r.log_z_hat))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_and_se(&values))
}

pub fn mean_and_se(values: &[f64]) -> ElboEstimate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    ElboEstimate { mean, std_err, n }
}

/// Normalized weights of each step, `[t * N + i]`.
fn normalized_step_weights(run: &SmcRunResult) -> Vec<f64> {
    let n = run.system.num_particles;
    let mut out = vec![0.0; run.system.log_weights.len()];
    for (src, dst) in run.system.log_weights.chunks(n).zip(out.chunks_mut(n)) {
        crate::linalg::normalize_log_weights(src, dst);
    }
    out
}

/// `∂ log Ẑ / ∂ℓ_t^i` with the genealogy fixed.
fn rep_coefficients(run: &SmcRunResult) -> Vec<f64> {
    match run.system.mode {
        ResamplingMode::EveryStep => normalized_step_weights(run),
        ResamplingMode::Never => {
            let mut w = vec![0.0; run.system.num_particles];
            crate::linalg::normalize_log_weights(&run.system.final_log_weights, &mut w);
            w.repeat(run.system.horizon())
        }
    }
}

/// Adds `scale · ∂ log P(a_{t-1} | ·)/∂ℓ_{t-1}` into `coeffs`: the ancestor
/// draws before step `t` contribute `count_j - N w̄_j` on particle `j`.
fn add_ancestor_score_coefficients(run: &SmcRunResult, wbar: &[f64], t: usize, scale: &[f64], coeffs: &mut [f64]) {
    let n = run.system.num_particles;
    let anc = run.system.step_ancestors(t);
    let prev = (t - 1) * n;
    for (i, &a) in anc.iter().enumerate() {
        coeffs[prev + a] += scale[i];
        for j in 0..n {
            coeffs[prev + j] -= scale[i] * wbar[prev + j];
        }
    }
}

/// `Σ_{t,i} coeffs[t·N+i] · d ℓ_t^i / d(λ, θ)` with ancestors fixed,
/// accumulated backwards through the genealogy.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sweep(
    run: &SmcRunResult,
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    coeffs: &[f64],
    with_theta: bool,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let sys = &run.system;
    let n = sys.num_particles;
    let d = sys.dim;
    let horizon = sys.horizon();
    if coeffs.len() != horizon * n {
        return Err(Error::Dimension("one coefficient per particle and step".into()));
    }
    let mut glambda = vec![0.0; family.num_params()];
    let mut gtheta = vec![0.0; if with_theta { model.num_theta() } else { 0 }];
    let mut adj = vec![0.0; n * d];
    let mut adj_prev = vec![0.0; n * d];
    let mut scratch = StepScratch::new(d);
    for t in (0..horizon).rev() {
        adj_prev.fill(0.0);
        let y = data.y(t);
        for i in 0..n {
            let (x_prev, a) = if t > 0 {
                let a = sys.step_ancestors(t)[i];
                (Some(sys.particle(t - 1, a)), a)
            } else {
                (None, 0)
            };
            let adj_i = &adj[i * d..(i + 1) * d];
            let c = coeffs[t * n + i];
            if c == 0.0 && adj_i.iter().all(|&v| v == 0.0) {
                continue;
            }
            step_vjp(
                model,
                family,
                params,
                t,
                y,
                x_prev,
                run.noise.eps(t, i),
                sys.particle(t, i),
                c,
                Some(adj_i),
                x_prev.map(|_| &mut adj_prev[a * d..(a + 1) * d]),
                &mut glambda,
                with_theta.then_some(gtheta.as_mut_slice()),
                &mut scratch,
            )?;
        }
        std::mem::swap(&mut adj, &mut adj_prev);
    }
    Ok((glambda, with_theta.then_some(gtheta)))
}

/// Pathwise gradient of `log Ẑ` for a completed sweep.
pub fn grad_rep_from_run(
    run: &SmcRunResult,
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    with_theta: bool,
) -> Result<GradientEstimate> {
    let coeffs = rep_coefficients(run);
    let (grad_lambda, grad_theta) = reverse_sweep(run, model, data, family, params, &coeffs, with_theta)?;
    Ok(GradientEstimate {
        elbo_hat: run.log_z_hat,
        grad_lambda,
        grad_theta,
        tag: EstimatorTag::RepOnly,
    })
}

/// One sweep and its pathwise gradient.
#[allow(clippy::too_many_arguments)]
pub fn grad_rep<R: Rng + ?Sized>(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    num_particles: usize,
    mode: ResamplingMode,
    rng: &mut R,
    with_theta: bool,
) -> Result<GradientEstimate> {
    let run = run_smc(model, data, family, params, num_particles, mode, rng)?;
    grad_rep_from_run(&run, model, data, family, params, with_theta)
}

/// Forward-mode version of [`grad_rep_from_run`]: carries `∂x/∂(λ, θ)` per
/// particle and copies the ancestor's sensitivity through resampling.
/// Quadratic in the parameter count; kept as an independent check.
pub fn grad_rep_forward(
    run: &SmcRunResult,
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    with_theta: bool,
) -> Result<GradientEstimate> {
    let sys = &run.system;
    let n = sys.num_particles;
    let coeffs = rep_coefficients(run);
    let np = family.num_params();
    let nt = if with_theta { model.num_theta() } else { 0 };
    let mut total = vec![0.0; np + nt];
    let mut sens: Vec<Sensitivity> = Vec::new();
    for t in 0..sys.horizon() {
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let (x_prev, s_prev) = if t > 0 {
                let a = sys.step_ancestors(t)[i];
                (Some(sys.particle(t - 1, a)), Some(&sens[a]))
            } else {
                (None, None)
            };
            let (g, s) = grad_incremental_log_weight(model, family, params, t, data.y(t), x_prev, run.noise.eps(t, i), s_prev, with_theta)?;
            let c = coeffs[t * n + i];
            for (o, v) in total.iter_mut().zip(g.lambda.iter().chain(&g.theta)) {
                *o += c * v;
            }
            next.push(s);
        }
        sens = next;
    }
    let theta = total.split_off(np);
    Ok(GradientEstimate {
        elbo_hat: run.log_z_hat,
        grad_lambda: total,
        grad_theta: with_theta.then_some(theta),
        tag: EstimatorTag::RepOnly,
    })
}

fn require_resampling(run: &SmcRunResult, what: &str) -> Result<()> {
    if run.system.mode != ResamplingMode::EveryStep {
        return Err(Error::InvalidArgument(format!("{what} needs resampling at every step")));
    }
    if run.system.num_particles < 2 {
        return Err(Error::InvalidArgument(format!("{what} needs at least two particles")));
    }
    Ok(())
}

/// Ancestor score term `Σ_{t≥1} (R_t - c_t) · ∇ log P(a_{t-1})` for a
/// completed sweep. The baselines are read before and updated after use.
pub fn grad_score_rb_from_run(
    run: &SmcRunResult,
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    cv: &mut ControlVariateState,
) -> Result<GradientEstimate> {
    require_resampling(run, "the Rao-Blackwellized score term")?;
    let n = run.system.num_particles;
    let horizon = run.system.horizon();
    let rewards = future_rewards(run);
    cv.prepare(&rewards);
    let baselines = cv.values(horizon);
    if baselines.len() != horizon || baselines.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("control variates must be finite, one per step".into()));
    }
    let wbar = normalized_step_weights(run);
    let mut coeffs = vec![0.0; horizon * n];
    for t in 1..horizon {
        let scale = vec![rewards[t] - baselines[t]; n];
        add_ancestor_score_coefficients(run, &wbar, t, &scale, &mut coeffs);
    }
    let (grad_lambda, _) = reverse_sweep(run, model, data, family, params, &coeffs, false)?;
    cv.update(&rewards);
    Ok(GradientEstimate {
        elbo_hat: run.log_z_hat,
        grad_lambda,
        grad_theta: None,
        tag: EstimatorTag::RepPlusScoreRB,
    })
}

/// One sweep and its ancestor score term (see [`grad_score_rb_from_run`]).
#[allow(clippy::too_many_arguments)]
pub fn grad_score_rb<R: Rng + ?Sized>(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    num_particles: usize,
    rng: &mut R,
    cv: &mut ControlVariateState,
) -> Result<GradientEstimate> {
    let run = run_smc(model, data, family, params, num_particles, ResamplingMode::EveryStep, rng)?;
    grad_score_rb_from_run(&run, model, data, family, params, cv)
}

/// `∇ log P(a_{t-1})` for each `t ≥ 1`, the zero-mean quantities the
/// baselines multiply. Entry 0 is the zero vector.
pub fn ancestor_scores(
    run: &SmcRunResult,
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
) -> Result<Vec<Vec<f64>>> {
    require_resampling(run, "the ancestor score")?;
    let n = run.system.num_particles;
    let horizon = run.system.horizon();
    let wbar = normalized_step_weights(run);
    let mut out = vec![vec![0.0; family.num_params()]];
    for t in 1..horizon {
        let mut coeffs = vec![0.0; horizon * n];
        add_ancestor_score_coefficients(run, &wbar, t, &vec![1.0; n], &mut coeffs);
        out.push(reverse_sweep(run, model, data, family, params, &coeffs, false)?.0);
    }
    Ok(out)
}

/// Leave-one-out replacement for the ancestor score term when `T = 2`:
/// `Σᵢ log((N-1)/N · Σ_ℓ w_2^ℓ / Σ_{j≠i} w_2^j) · ∇ log w̄_1^{a_i}`.
pub fn leave_one_out_t2_from_run(
    run: &SmcRunResult,
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
) -> Result<GradientEstimate> {
    if run.system.horizon() != 2 {
        return Err(Error::InvalidArgument("the leave-one-out estimator is defined for T = 2".into()));
    }
    require_resampling(run, "the leave-one-out estimator")?;
    let n = run.system.num_particles;
    let w2 = run.system.step_log_weights(1);
    let total = log_sum_exp(w2);
    let ratio = ((n - 1) as f64 / n as f64).ln();
    let mut others = Vec::with_capacity(n - 1);
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            others.clear();
            others.extend(w2.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v));
            ratio + total - log_sum_exp(&others)
        })
        .collect();
    if scale.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical { t: 1, msg: "leave-one-out weight sum is zero".into() });
    }
    let wbar = normalized_step_weights(run);
    let mut coeffs = vec![0.0; 2 * n];
    add_ancestor_score_coefficients(run, &wbar, 1, &scale, &mut coeffs);
    let (grad_lambda, _) = reverse_sweep(run, model, data, family, params, &coeffs, false)?;
    Ok(GradientEstimate {
        elbo_hat: run.log_z_hat,
        grad_lambda,
        grad_theta: None,
        tag: EstimatorTag::LeaveOneOutT2,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn leave_one_out_t2<R: Rng + ?Sized>(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    num_particles: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    if data.len() != 2 {
        return Err(Error::InvalidArgument("the leave-one-out estimator is defined for T = 2".into()));
    }
    let run = run_smc(model, data, family, params, num_particles, ResamplingMode::EveryStep, rng)?;
    leave_one_out_t2_from_run(&run, model, data, family, params)
}

/// `log p̂ · ∇ log φ̃ + ∇ log p̂` with every derivative taken at fixed
/// particles, where `φ̃` is the joint density of all particles and ancestors.
pub fn grad_score_full_from_run(
    run: &SmcRunResult,
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
) -> Result<GradientEstimate> {
    if run.system.mode != ResamplingMode::EveryStep {
        return Err(Error::InvalidArgument("the score-function estimator needs resampling at every step".into()));
    }
    let sys = &run.system;
    let n = sys.num_particles;
    let horizon = sys.horizon();
    let wbar = normalized_step_weights(run);
    let log_z = run.log_z_hat;
    // d log w_t^j / dλ = -s_t^j with s the explicit proposal score, so
    // ∇log φ̃ = Σ s - Σ_{t<T} Σ_j (count_j - N w̄_j) s and ∇log p̂ = -Σ w̄ s.
    let mut counts = vec![0.0; n];
    let mut score = vec![0.0; family.num_params()];
    let mut out = vec![0.0; family.num_params()];
    for t in 0..horizon {
        counts.fill(0.0);
        if t + 1 < horizon {
            for &a in sys.step_ancestors(t + 1) {
                counts[a] += 1.0;
            }
        }
        for j in 0..n {
            let x_prev = (t > 0).then(|| sys.particle(t - 1, sys.step_ancestors(t)[j]));
            score.fill(0.0);
            grad_log_proposal_params(model, family, params, t, data.y(t), x_prev, sys.particle(t, j), &mut score, None)?;
            let w = wbar[t * n + j];
            let phi = if t + 1 < horizon { 1.0 - (counts[j] - n as f64 * w) } else { 1.0 };
            let c = log_z * phi - w;
            for (o, s) in out.iter_mut().zip(&score) {
                *o += c * s;
            }
        }
    }
    Ok(GradientEstimate {
        elbo_hat: log_z,
        grad_lambda: out,
        grad_theta: None,
        tag: EstimatorTag::ScoreFull,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn grad_score_full<R: Rng + ?Sized>(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    num_particles: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    let run = run_smc(model, data, family, params, num_particles, ResamplingMode::EveryStep, rng)?;
    grad_score_full_from_run(&run, model, data, family, params)
}

/// Gradient estimate for one training iteration. `θ`-gradients come only
/// from the pathwise term.
#[allow(clippy::too_many_arguments)]
pub fn estimate_gradient<R: Rng + ?Sized>(
    tag: EstimatorTag,
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    num_particles: usize,
    mode: ResamplingMode,
    rng: &mut R,
    cv: &mut ControlVariateState,
    with_theta: bool,
) -> Result<GradientEstimate> {
    let run = run_smc(model, data, family, params, num_particles, mode, rng)?;
    let add = |mut base: GradientEstimate, extra: GradientEstimate| {
        for (b, e) in base.grad_lambda.iter_mut().zip(&extra.grad_lambda) {
            *b += e;
        }
        base.tag = extra.tag;
        base
    };
    match tag {
        EstimatorTag::RepOnly => grad_rep_from_run(&run, model, data, family, params, with_theta),
        EstimatorTag::RepPlusScoreRB => {
            let rep = grad_rep_from_run(&run, model, data, family, params, with_theta)?;
            Ok(add(rep, grad_score_rb_from_run(&run, model, data, family, params, cv)?))
        }
        EstimatorTag::LeaveOneOutT2 => {
            let rep = grad_rep_from_run(&run, model, data, family, params, with_theta)?;
            Ok(add(rep, leave_one_out_t2_from_run(&run, model, data, family, params)?))
        }
        EstimatorTag::ScoreFull => grad_score_full_from_run(&run, model, data, family, params),
        EstimatorTag::FiniteDifference => Err(Error::Config("finite differences are an oracle, not a training estimator".into())),
    }
}

/// Central differences, coordinate-wise; both evaluations of a coordinate
/// receive the same `seed`.
pub fn finite_difference_grad<F>(mut objective: F, at: &[f64], step: f64, seed: u64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], u64) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut x = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for k in 0..at.len() {
        x[k] = at[k] + step;
        let plus = objective(&x, seed)?;
        x[k] = at[k] - step;
        let minus = objective(&x, seed)?;
        x[k] = at[k];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Worst relative error `|a − f| / (1 + |a|)` of analytic gradients against
/// central differences on one sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `∇_{λ,θ} log Ẑ` with noise and ancestors frozen.
    pub pathwise: f64,
    /// `∇_{λ,θ} log r(x_t | x_{t-1})` at the sampled states, every step.
    pub score: f64,
    /// Number of `(λ, θ)` coordinates checked.
    pub coordinates: usize,
}

/// Checks every analytic gradient path on the sweep seeded `(seed, 0)`.
/// `θ` is included whenever the model has parameters.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    num_particles: usize,
    mode: ResamplingMode,
    seed: u64,
    step: f64,
) -> Result<GradCheck> {
    let run = run_smc(model, data, family, params, num_particles, mode, &mut stream_rng(seed, 0))?;
    let np = params.len();
    let nt = model.num_theta();
    let with_theta = nt > 0;
    let at: Vec<f64> = params.iter().copied().chain(model.theta()).collect();
    let rel = |a: &[f64], f: &[f64]| a.iter().zip(f).map(|(a, f)| (a - f).abs() / (1.0 + a.abs())).fold(0.0, f64::max);

    let rep = grad_rep_from_run(&run, model, data, family, params, with_theta)?;
    let analytic: Vec<f64> = rep.grad_lambda.iter().chain(rep.grad_theta.iter().flatten()).copied().collect();
    let numeric = finite_difference_grad(
        |p, _| {
            let m = model.with_theta(&p[np..])?;
            let r = run_with_ancestors(m.as_ref(), data, family, &p[..np], mode, run.noise.clone(), Some(&run.system.ancestors))?;
            Ok(r.log_z_hat)
        },
        &at,
        step,
        seed,
    )?;
    let pathwise = rel(&analytic, &numeric);

    let sys = &run.system;
    let mut score: f64 = 0.0;
    for t in 0..data.len() {
        let parent = (t > 0).then(|| sys.particle(t - 1, sys.step_ancestors(t)[0]));
        let x = sys.particle(t, 0);
        let y = data.y(t);
        let mut gl = vec![0.0; np];
        let mut gt = vec![0.0; nt];
        grad_log_proposal_params(model, family, params, t, y, parent, x, &mut gl, with_theta.then_some(gt.as_mut_slice()))?;
        gl.extend(gt);
        let numeric = finite_difference_grad(
            |p, _| {
                let m = model.with_theta(&p[np..])?;
                Ok(family.log_density(m.as_ref(), &p[..np], t, y, parent, x))
            },
            &at,
            step,
            seed,
        )?;
        score = score.max(rel(&gl, &numeric));
    }
    Ok(GradCheck { pathwise, score, coordinates: at.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LgssmModel, StochVolModel};
    use crate::proposals::{PerStepAffineDiagonal, PriorTiltedGaussian, ScalarMeanShift};
    use crate::smc::{run_with_ancestors, NoiseRecord};

    fn scalar() -> LgssmModel {
        LgssmModel::scalar(0.5, 1.0, 1.0, 1.0).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs()))
    }

    #[test]
    fn finite_differences_of_a_quadratic() {
        let g = finite_difference_grad(|l, _| Ok(l.iter().map(|v| v * v).sum()), &[1.0, 2.0], 1e-4, 0).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g2 = finite_difference_grad(|l, _| Ok(l.iter().map(|v| v * v).sum()), &[1.0, 2.0], 1e-4, 77).unwrap();
        assert_eq!(g, g2);
        assert!(finite_difference_grad(|_, _| Ok(0.0), &[1.0], 0.0, 0).is_err());
    }

    /// `log Ẑ` with noise and genealogy held fixed, as a function of `(λ, θ)`.
    #[allow(clippy::too_many_arguments)]
    fn frozen_log_z(
        model: &dyn StateSpaceModel,
        data: &Dataset,
        family: &dyn ProposalFamily,
        noise: &NoiseRecord,
        ancestors: &[usize],
        mode: ResamplingMode,
        np: usize,
        p: &[f64],
    ) -> f64 {
        let m = model.with_theta(&p[np..]).unwrap();
        run_with_ancestors(m.as_ref(), data, family, &p[..np], mode, noise.clone(), Some(ancestors))
            .unwrap()
            .log_z_hat
    }

    fn check_rep_against_fd(model: &dyn StateSpaceModel, data: &Dataset, family: &dyn ProposalFamily, params: &[f64], n: usize, mode: ResamplingMode, seed: u64) {
        let run = run_smc(model, data, family, params, n, mode, &mut stream_rng(seed, 0)).unwrap();
        let rev = grad_rep_from_run(&run, model, data, family, params, true).unwrap();
        let fwd = grad_rep_forward(&run, model, data, family, params, true).unwrap();
        assert!(close(&rev.grad_lambda, &fwd.grad_lambda, 1e-10));
        assert!(close(rev.grad_theta.as_ref().unwrap(), fwd.grad_theta.as_ref().unwrap(), 1e-10));

        let np = params.len();
        let at: Vec<f64> = params.iter().copied().chain(model.theta()).collect();
        let fd = finite_difference_grad(
            |p, _| Ok(frozen_log_z(model, data, family, &run.noise, &run.system.ancestors, mode, np, p)),
            &at,
            1e-5,
            seed,
        )
        .unwrap();
        let analytic: Vec<f64> = rev.grad_lambda.iter().chain(rev.grad_theta.as_ref().unwrap()).copied().collect();
        for (a, f) in analytic.iter().zip(&fd) {
            assert!((a - f).abs() / (1.0 + a.abs()) < 1e-6, "{a} vs {f}");
        }
    }

    #[test]
    fn reverse_sweep_matches_forward_mode_and_finite_differences() {
        let data = Dataset::from_rows(&[vec![0.4], vec![-1.2], vec![0.9], vec![2.0]]).unwrap();
        for mode in [ResamplingMode::EveryStep, ResamplingMode::Never] {
            check_rep_against_fd(&scalar(), &data, &ScalarMeanShift, &[0.3], 5, mode, 1);
        }

        let lg = LgssmModel::banded(3, 1, 0.42, 0.3, 1.0, crate::models::CKind::Dense, 4).unwrap();
        let (d3, _) = crate::models::simulate_dataset(&lg, 4, 2).unwrap();
        let aff = PerStepAffineDiagonal::new(lg.a().clone(), 4).unwrap();
        let mut p = aff.prior_init(&lg).unwrap().0;
        for (k, v) in p.iter_mut().enumerate() {
            *v += 0.05 * ((k * 7 % 11) as f64 - 5.0);
        }
        check_rep_against_fd(&lg, &d3, &aff, &p, 4, ResamplingMode::EveryStep, 3);

        let sv = StochVolModel::isotropic(2, 0.1, 0.9, 0.1, 0.7).unwrap();
        let (dsv, _) = crate::models::simulate_dataset(&sv, 5, 5).unwrap();
        let tilt = PriorTiltedGaussian::new(2, 5);
        let p = tilt.uniform_init(0.2, 0.5).0;
        for mode in [ResamplingMode::EveryStep, ResamplingMode::Never] {
            check_rep_against_fd(&sv, &dsv, &tilt, &p, 4, mode, 6);
        }
    }

    #[test]
    fn gradient_check_covers_both_paths() {
        let sv = StochVolModel::isotropic(2, 0.1, 0.9, 0.1, 0.7).unwrap();
        let (d, _) = crate::models::simulate_dataset(&sv, 4, 1).unwrap();
        let tilt = PriorTiltedGaussian::new(2, 4);
        let p = tilt.uniform_init(-0.3, 0.8).0;
        for mode in [ResamplingMode::EveryStep, ResamplingMode::Never] {
            let c = gradient_check(&sv, &d, &tilt, &p, 3, mode, 2, 1e-5).unwrap();
            assert!(c.pathwise < 1e-6 && c.score < 1e-6, "{c:?}");
            assert_eq!(c.coordinates, tilt.num_params() + 8);
        }
    }

    #[test]
    fn one_hot_step_contributes_the_survivor_gradient() {
        // A single particle at the last step makes w̄ one-hot there; the
        // gradient then equals that particle's own derivative.
        let m = scalar();
        let data = Dataset::from_rows(&[vec![0.4]]).unwrap();
        let run = run_smc(&m, &data, &ScalarMeanShift, &[0.3], 1, ResamplingMode::EveryStep, &mut stream_rng(2, 0)).unwrap();
        let g = grad_rep_from_run(&run, &m, &data, &ScalarMeanShift, &[0.3], false).unwrap();
        let (own, _) = grad_incremental_log_weight(&m, &ScalarMeanShift, &[0.3], 0, &[0.4], None, run.noise.eps(0, 0), None, false).unwrap();
        assert!((g.grad_lambda[0] - own.lambda[0]).abs() < 1e-14);
    }

    #[test]
    fn score_terms_vanish_at_one_step() {
        let m = scalar();
        let data = Dataset::from_rows(&[vec![0.4]]).unwrap();
        let g = grad_score_rb(&m, &data, &ScalarMeanShift, &[0.3], 4, &mut stream_rng(0, 0), &mut ControlVariateState::Disabled).unwrap();
        assert_eq!(g.grad_lambda, vec![0.0]);
        assert!(grad_score_rb(&m, &data, &ScalarMeanShift, &[0.3], 1, &mut stream_rng(0, 0), &mut ControlVariateState::Disabled).is_err());
    }

    #[test]
    fn leave_one_out_with_equal_final_weights_is_zero() {
        // C = 0 and bootstrap-like weights: every w_2 equals N(y; 0, 1).
        let m = LgssmModel::scalar(0.5, 1.0, 0.0, 1.0).unwrap();
        let data = Dataset::from_rows(&[vec![0.4], vec![1.0]]).unwrap();
        // ScalarMeanShift at λ=0 is the prior for t ≥ 1 but not at t = 0, so
        // first-step weights differ while final ones are equal.
        let g = leave_one_out_t2(&m, &data, &ScalarMeanShift, &[0.0], 4, &mut stream_rng(3, 0)).unwrap();
        assert!(g.grad_lambda.iter().all(|v| v.abs() < 1e-12), "{:?}", g.grad_lambda);
        let d3 = Dataset::from_rows(&[vec![0.4], vec![1.0], vec![0.0]]).unwrap();
        assert!(leave_one_out_t2(&m, &d3, &ScalarMeanShift, &[0.0], 4, &mut stream_rng(3, 0)).is_err());
    }

    #[test]
    fn ema_baseline_initializes_then_tracks() {
        let mut cv = ControlVariateState::ema();
        cv.prepare(&[1.0, 2.0]);
        cv.update(&[1.0, 2.0]);
        assert_eq!(cv.values(2), vec![1.0, 2.0]);
        cv.prepare(&[5.0, 5.0]);
        cv.update(&[11.0, 12.0]);
        let v = cv.values(2);
        assert!((v[0] - 2.0).abs() < 1e-12 && (v[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_particle_elbo_is_the_mean_log_weight_sum() {
        let m = scalar();
        let data = Dataset::from_rows(&[vec![0.4], vec![-0.3]]).unwrap();
        let e = surrogate_elbo(&m, &data, &ScalarMeanShift, &[0.1], 1, ResamplingMode::EveryStep, 50, 9).unwrap();
        let manual: Vec<f64> = (0..50)
            .map(|k| {
                let r = run_smc(&m, &data, &ScalarMeanShift, &[0.1], 1, ResamplingMode::EveryStep, &mut stream_rng(9, k)).unwrap();
                r.system.log_weights.iter().sum()
            })
            .collect();
        assert!((e.mean - mean_and_se(&manual).mean).abs() < 1e-12);
    }

    #[test]
    fn estimator_tags_round_trip() {
        for t in [EstimatorTag::RepOnly, EstimatorTag::RepPlusScoreRB, EstimatorTag::ScoreFull, EstimatorTag::LeaveOneOutT2, EstimatorTag::FiniteDifference] {
            assert_eq!(t.as_str().parse::<EstimatorTag>().unwrap(), t);
        }
    }
}
