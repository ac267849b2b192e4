//! Stochastic gradient ascent on the surrogate ELBO, over `λ` alone or
//! jointly over `(λ, θ)`.

use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::gradients::{estimate_gradient, surrogate_elbo, ControlVariateState, EstimatorTag};
use crate::models::{Dataset, StateSpaceModel};
use crate::proposals::ProposalFamily;
use crate::rng::stream_rng;
use crate::smc::ResamplingMode;

/// Offset separating evaluation seeds from training seeds.
pub const EVAL_SEED_OFFSET: u64 = 0x5eed_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// `ρⁿ = η n^{-1/2+δ} / (1 + √sⁿ)` with `sⁿ = 0.1 g² + 0.9 sⁿ⁻¹`,
    /// `s¹ = g₁²`.
    Decaying { eta: f64 },
    Adam { rate: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl StepRule {
    pub fn adam(rate: f64) -> Self {
        Self::Adam { rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub const STEP_DELTA: f64 = 1e-16;
pub const STEP_DECAY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub rule: StepRule,
    /// Number of updates taken.
    pub n: u64,
    /// Squared-gradient average for [`StepRule::Decaying`], second moment
    /// for Adam.
    pub s: Vec<f64>,
    /// Adam first moment.
    pub m: Vec<f64>,
    /// Multiplies every increment taken by [`StepState::ascend`].
    pub scale: f64,
}

impl StepState {
    pub fn new(rule: StepRule, dim: usize) -> Self {
        Self { rule, n: 0, s: vec![0.0; dim], m: vec![0.0; dim], scale: 1.0 }
    }

    /// Per-coordinate step for the next update (`n + 1`), advancing the
    /// state. The update is `λ += ρ ⊙ g` for the decaying rule; for Adam the
    /// returned vector is the full increment.
    pub fn step_size(&mut self, grad: &[f64]) -> Vec<f64> {
        self.n += 1;
        let n = self.n as f64;
        match self.rule {
            StepRule::Decaying { eta } => {
                for (s, g) in self.s.iter_mut().zip(grad) {
                    *s = if self.n == 1 { g * g } else { STEP_DECAY * g * g + (1.0 - STEP_DECAY) * *s };
                }
                let base = eta * n.powf(-0.5 + STEP_DELTA);
                self.s.iter().map(|s| base / (1.0 + s.sqrt())).collect()
            }
            StepRule::Adam { rate, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powf(n);
                let c2 = 1.0 - beta2.powf(n);
                self.m
                    .iter_mut()
                    .zip(self.s.iter_mut())
                    .zip(grad)
                    .map(|((m, v), &g)| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        rate * (*m / c1) / ((*v / c2).sqrt() + eps)
                    })
                    .collect()
            }
        }
    }

    /// One ascent step on `params`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        let rho = self.step_size(grad);
        match self.rule {
            StepRule::Decaying { .. } => {
                for ((p, r), g) in params.iter_mut().zip(&rho).zip(grad) {
                    *p += self.scale * r * g;
                }
            }
            StepRule::Adam { .. } => {
                for (p, r) in params.iter_mut().zip(&rho) {
                    *p += self.scale * r;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub estimator: EstimatorTag,
    pub mode: ResamplingMode,
    pub num_particles: usize,
    pub iterations: usize,
    pub seed: u64,
    pub rule: StepRule,
    /// Separate rule for `θ` in joint fits; defaults to `rule`.
    pub theta_rule: Option<StepRule>,
    /// Evaluate the surrogate ELBO every this many iterations (0: only at
    /// the end).
    pub eval_every: usize,
    pub eval_seeds: usize,
    pub control_variate: ControlVariateState,
    /// `(k, f)`: increments after iteration `k` are scaled by `f`.
    pub anneal: Option<(usize, f64)>,
}

impl FitConfig {
    pub fn new(num_particles: usize, iterations: usize, seed: u64) -> Self {
        Self {
            estimator: EstimatorTag::RepOnly,
            mode: ResamplingMode::EveryStep,
            num_particles,
            iterations,
            seed,
            rule: StepRule::adam(0.01),
            theta_rule: None,
            eval_every: 0,
            eval_seeds: 1000,
            control_variate: ControlVariateState::ema(),
            anneal: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// 1-based index of the update that follows this gradient.
    pub iteration: usize,
    pub elbo_hat: f64,
    /// Fresh-sweep estimate at the parameters before the update, when this
    /// iteration was an evaluation point.
    pub smoothed_elbo: Option<f64>,
    pub smoothed_se: Option<f64>,
    pub wall_time: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitStatus {
    Completed,
    /// Parameters became non-finite at this iteration; the returned
    /// parameters are the last finite ones.
    Diverged { iteration: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub lambda: Vec<f64>,
    pub theta: Option<Vec<f64>>,
    pub trace: Vec<TraceRow>,
    pub status: FitStatus,
    /// Evaluated surrogate ELBO at the returned parameters.
    pub final_elbo: Option<(f64, f64)>,
}

/// Fits `λ` with the model held fixed.
pub fn fit_vsmc(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    init: &[f64],
    config: &FitConfig,
) -> Result<FitResult> {
    fit(model, data, family, init, None, config)
}

/// Fits `(λ, θ)` jointly; `θ` always follows the pathwise term. `theta_mask[k] = false`
/// holds `θ_k` at its initial value.
pub fn fit_vem(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    init: &[f64],
    theta_mask: Option<&[bool]>,
    config: &FitConfig,
) -> Result<FitResult> {
    let nt = model.num_theta();
    let mask = theta_mask.map(<[bool]>::to_vec).unwrap_or_else(|| vec![true; nt]);
    if mask.len() != nt {
        return Err(Error::Dimension(format!("θ mask needs {nt} entries")));
    }
    if !matches!(config.estimator, EstimatorTag::RepOnly | EstimatorTag::RepPlusScoreRB) {
        return Err(Error::Config("joint fits need rep_only or rep_plus_score_rb".into()));
    }
    fit(model, data, family, init, Some(mask), config)
}

fn fit(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    init: &[f64],
    theta_mask: Option<Vec<bool>>,
    config: &FitConfig,
) -> Result<FitResult> {
    if init.len() != family.num_params() {
        return Err(Error::Dimension(format!("{} expects {} parameters", family.name(), family.num_params())));
    }
    let learn_theta = theta_mask.is_some();
    let mut lambda = init.to_vec();
    let mut theta = model.theta();
    let mut owned: Option<Box<dyn StateSpaceModel>> = None;
    let mut lstate = StepState::new(config.rule, lambda.len());
    let mut tstate = StepState::new(config.theta_rule.unwrap_or(config.rule), theta.len());
    let mut cv = config.control_variate.clone();
    let mut trace = Vec::with_capacity(config.iterations);
    let start = Instant::now();
    let mut status = FitStatus::Completed;

    for it in 1..=config.iterations {
        if let Some((at, factor)) = config.anneal {
            if it == at + 1 {
                lstate.scale = factor;
                tstate.scale = factor;
            }
        }
        let current: &dyn StateSpaceModel = owned.as_deref().unwrap_or(model);
        let (smoothed_elbo, smoothed_se) = if config.eval_every > 0 && (it - 1) % config.eval_every == 0 {
            let e = evaluate(current, data, family, &lambda, config)?;
            (Some(e.0), Some(e.1))
        } else {
            (None, None)
        };
        let mut rng = stream_rng(config.seed, it as u64);
        let g = estimate_gradient(
            config.estimator,
            current,
            data,
            family,
            &lambda,
            config.num_particles,
            config.mode,
            &mut rng,
            &mut cv,
            learn_theta,
        )?;
        trace.push(TraceRow {
            iteration: it,
            elbo_hat: g.elbo_hat,
            smoothed_elbo,
            smoothed_se,
            wall_time: start.elapsed().as_secs_f64(),
            seed: config.seed,
        });

        let mut next = lambda.clone();
        lstate.ascend(&mut next, &g.grad_lambda);
        let mut next_theta = theta.clone();
        if let (Some(mask), Some(gt)) = (&theta_mask, &g.grad_theta) {
            let masked: Vec<f64> = gt.iter().zip(mask).map(|(&v, &on)| if on { v } else { 0.0 }).collect();
            tstate.ascend(&mut next_theta, &masked);
            for ((n, &old), &on) in next_theta.iter_mut().zip(&theta).zip(mask) {
                if !on {
                    *n = old;
                }
            }
        }
        if next.iter().chain(&next_theta).any(|v| !v.is_finite()) {
            status = FitStatus::Diverged { iteration: it };
            break;
        }
        lambda = next;
        if next_theta != theta {
            match model.with_theta(&next_theta) {
                Ok(m) => owned = Some(m),
                Err(_) => {
                    status = FitStatus::Diverged { iteration: it };
                    break;
                }
            }
            theta = next_theta;
        }
    }

    let current: &dyn StateSpaceModel = owned.as_deref().unwrap_or(model);
    let final_elbo = if config.eval_seeds > 0 && config.iterations > 0 {
        Some(evaluate(current, data, family, &lambda, config)?)
    } else {
        None
    };
    Ok(FitResult {
        lambda,
        theta: theta_mask.map(|_| theta),
        trace,
        status,
        final_elbo,
    })
}

fn evaluate(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    lambda: &[f64],
    config: &FitConfig,
) -> Result<(f64, f64)> {
    let e = surrogate_elbo(
        model,
        data,
        family,
        lambda,
        config.num_particles,
        config.mode,
        config.eval_seeds.max(1),
        config.seed.wrapping_add(EVAL_SEED_OFFSET),
    )?;
    Ok((e.mean, e.std_err))
}

/// Parameters saved from a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub family: String,
    pub iteration: usize,
    pub lambda: Vec<f64>,
    pub theta: Option<Vec<f64>>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

/// Plain text, one `key values...` line per field; floats are written in
/// shortest round-trip form.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut s = format!("family {}\niteration {}\nlambda {}\n", ckpt.family, ckpt.iteration, join(&ckpt.lambda));
    if let Some(t) = &ckpt.theta {
        s.push_str(&format!("theta {}\n", join(t)));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut family = None;
    let mut iteration = None;
    let mut lambda = None;
    let mut theta = None;
    for (row, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        let parse_floats = |parts: std::str::SplitWhitespace| {
            parts
                .enumerate()
                .map(|(col, v)| {
                    v.parse::<f64>().map_err(|e| Error::Parse { row: row + 1, column: col + 2, msg: e.to_string() })
                })
                .collect::<Result<Vec<f64>>>()
        };
        match key {
            "family" => family = parts.next().map(str::to_owned),
            "iteration" => {
                iteration = Some(parts.next().unwrap_or("").parse::<usize>().map_err(|e| Error::Parse {
                    row: row + 1,
                    column: 2,
                    msg: e.to_string(),
                })?)
            }
            "lambda" => lambda = Some(parse_floats(parts)?),
            "theta" => theta = Some(parse_floats(parts)?),
            other => {
                return Err(Error::Parse { row: row + 1, column: 1, msg: format!("unknown key `{other}`") });
            }
        }
    }
    let missing = |k: &str| Error::Parse { row: 0, column: 0, msg: format!("checkpoint lacks `{k}`") };
    Ok(Checkpoint {
        family: family.ok_or_else(|| missing("family"))?,
        iteration: iteration.ok_or_else(|| missing("iteration"))?,
        lambda: lambda.ok_or_else(|| missing("lambda"))?,
        theta,
    })
}
