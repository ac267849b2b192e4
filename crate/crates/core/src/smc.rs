//! The particle sweep: propose, weight, resample, accumulate `log Ẑ`, and
//! return one trajectory by ancestor backtracking.
//!
//! All randomness of a sweep is drawn up front into a [`NoiseRecord`], so a
//! run is a pure function of `(model, data, family, λ, N, mode, noise)` and
//! gradient estimators can replay it exactly.
//!
//! Indices are 0-based throughout: particles `0..N`, steps `0..T`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, normalize_log_weights};
use crate::models::{Dataset, StateSpaceModel};
use crate::proposals::{incremental_log_weight, ProposalFamily};
use crate::rng::fill_standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResamplingMode {
    /// Multinomial resampling before every step after the first.
    EveryStep,
    /// No resampling; weights multiply along each trajectory (IWAE).
    Never,
}

impl ResamplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ResamplingMode::EveryStep => "every_step",
            ResamplingMode::Never => "never",
        }
    }
}

impl std::str::FromStr for ResamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "every_step" | "smc" => Ok(Self::EveryStep),
            "never" | "iwae" => Ok(Self::Never),
            _ => Err(Error::Config(format!("unknown resampling mode `{s}`"))),
        }
    }
}

/// Every random number a sweep consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    pub num_particles: usize,
    pub dim: usize,
    pub horizon: usize,
    /// Standard-normal proposal noise, indexed `[(t * N + i) * d + k]`.
    pub eps: Vec<f64>,
    /// Uniforms for the ancestor draws before step `t ≥ 1`, indexed
    /// `[(t - 1) * N + i]`.
    pub ancestor_uniforms: Vec<f64>,
    /// Uniform for the returned-trajectory index `b_T`.
    pub final_uniform: f64,
}

impl NoiseRecord {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, num_particles: usize, dim: usize, horizon: usize) -> Self {
        let mut eps = vec![0.0; horizon * num_particles * dim];
        fill_standard_normal(rng, &mut eps);
        let ancestor_uniforms = (0..horizon.saturating_sub(1) * num_particles)
            .map(|_| rng.random::<f64>())
            .collect();
        Self {
            num_particles,
            dim,
            horizon,
            eps,
            ancestor_uniforms,
            final_uniform: rng.random(),
        }
    }

    pub fn eps(&self, t: usize, i: usize) -> &[f64] {
        let o = (t * self.num_particles + i) * self.dim;
        &self.eps[o..o + self.dim]
    }
}

/// Particles, weights and genealogy of a completed sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    pub num_particles: usize,
    pub dim: usize,
    pub mode: ResamplingMode,
    /// Indexed `[(t * N + i) * d + k]`.
    pub particles: Vec<f64>,
    /// Incremental log-weights `log w_t^i`, indexed `[t * N + i]`.
    pub log_weights: Vec<f64>,
    /// Ancestor of particle `i` at step `t ≥ 1`, indexed `[(t - 1) * N + i]`.
    /// The identity under [`ResamplingMode::Never`].
    pub ancestors: Vec<usize>,
    /// Per-step factors of `log Ẑ`. For `Never`, entry `t` is
    /// `log(Σᵢ W_t^i / Σᵢ W_{t-1}^i)` with cumulative weights `W`, so the
    /// entries still sum to `log Ẑ`.
    pub log_z_terms: Vec<f64>,
    /// Log-weights that select the returned trajectory: incremental weights
    /// at the last step for `EveryStep`, cumulative weights for `Never`.
    pub final_log_weights: Vec<f64>,
}

impl ParticleSystem {
    pub fn horizon(&self) -> usize {
        self.log_z_terms.len()
    }

    pub fn particle(&self, t: usize, i: usize) -> &[f64] {
        let o = (t * self.num_particles + i) * self.dim;
        &self.particles[o..o + self.dim]
    }

    pub fn step_log_weights(&self, t: usize) -> &[f64] {
        &self.log_weights[t * self.num_particles..(t + 1) * self.num_particles]
    }

    /// Ancestors used to build step `t` (`t ≥ 1`).
    pub fn step_ancestors(&self, t: usize) -> &[usize] {
        &self.ancestors[(t - 1) * self.num_particles..t * self.num_particles]
    }

    pub fn log_z(&self) -> f64 {
        self.log_z_terms.iter().sum()
    }

    /// Path `x_{0:T-1}` ending in particle `b` at the last step, flattened
    /// `T × d`.
    pub fn backtrack(&self, b: usize) -> Vec<f64> {
        let horizon = self.horizon();
        let mut out = vec![0.0; horizon * self.dim];
        let mut idx = b;
        for t in (0..horizon).rev() {
            out[t * self.dim..(t + 1) * self.dim].copy_from_slice(self.particle(t, idx));
            if t > 0 {
                idx = self.step_ancestors(t)[idx];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcRunResult {
    /// `T × d` returned path.
    pub trajectory: Vec<f64>,
    pub chosen_index: usize,
    pub log_z_hat: f64,
    pub system: ParticleSystem,
    pub noise: NoiseRecord,
}

/// Inverse-CDF categorical draw from normalized weights.
fn categorical(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    // round-off left u above the final partial sum
    last
}

fn normalized(logw: &[f64], t: usize) -> Result<Vec<f64>> {
    let mut w = vec![0.0; logw.len()];
    let lse = normalize_log_weights(logw, &mut w);
    if lse == f64::NEG_INFINITY {
        return Err(Error::WeightCollapse { t });
    }
    if !lse.is_finite() {
        return Err(Error::Numerical { t, msg: format!("log-weight normalizer is {lse}") });
    }
    Ok(w)
}

fn resample_with_uniforms(logw: &[f64], uniforms: &[f64], t: usize, out: &mut [usize]) -> Result<()> {
    let w = normalized(logw, t)?;
    for (a, &u) in out.iter_mut().zip(uniforms) {
        *a = categorical(&w, u);
    }
    Ok(())
}

/// `N` i.i.d. draws from `softmax(logw)` (0-based indices).
pub fn resample_ancestors<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let uniforms: Vec<f64> = (0..logw.len()).map(|_| rng.random()).collect();
    let mut out = vec![0; logw.len()];
    resample_with_uniforms(logw, &uniforms, 0, &mut out)?;
    Ok(out)
}

fn check_inputs(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    num_particles: usize,
) -> Result<()> {
    if num_particles == 0 {
        return Err(Error::InvalidArgument("need at least one particle".into()));
    }
    if data.obs_dim() != model.obs_dim() {
        return Err(Error::Dimension(format!(
            "data has {} columns, model observes {}",
            data.obs_dim(),
            model.obs_dim()
        )));
    }
    if family.state_dim() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "proposal dimension {} does not match state dimension {}",
            family.state_dim(),
            model.state_dim()
        )));
    }
    if params.len() != family.num_params() {
        return Err(Error::Dimension(format!(
            "{} expects {} parameters, got {}",
            family.name(),
            family.num_params(),
            params.len()
        )));
    }
    family.check(model, data.len())
}

/// Runs one sweep, drawing its noise from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn run_smc<R: Rng + ?Sized>(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    num_particles: usize,
    mode: ResamplingMode,
    rng: &mut R,
) -> Result<SmcRunResult> {
    check_inputs(model, data, family, params, num_particles)?;
    let noise = NoiseRecord::draw(rng, num_particles, model.state_dim(), data.len());
    run_with_noise(model, data, family, params, mode, noise)
}

/// Replays a sweep from recorded noise.
pub fn run_with_noise(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    mode: ResamplingMode,
    noise: NoiseRecord,
) -> Result<SmcRunResult> {
    run_with_ancestors(model, data, family, params, mode, noise, None)
}

/// Like [`run_with_noise`], but with the genealogy forced to `ancestors`
/// (layout as [`ParticleSystem::ancestors`]). Used to hold resampling fixed
/// when differentiating numerically.
#[allow(clippy::too_many_arguments)]
pub fn run_with_ancestors(
    model: &dyn StateSpaceModel,
    data: &Dataset,
    family: &dyn ProposalFamily,
    params: &[f64],
    mode: ResamplingMode,
    noise: NoiseRecord,
    ancestors: Option<&[usize]>,
) -> Result<SmcRunResult> {
    let n = noise.num_particles;
    let d = model.state_dim();
    let horizon = data.len();
    check_inputs(model, data, family, params, n)?;
    if noise.dim != d || noise.horizon != horizon {
        return Err(Error::Dimension("noise record does not match the run".into()));
    }
    if let Some(a) = ancestors {
        if a.len() != horizon.saturating_sub(1) * n || a.iter().any(|&j| j >= n) {
            return Err(Error::Dimension("forced ancestors have the wrong shape".into()));
        }
    }

    let mut sys = ParticleSystem {
        num_particles: n,
        dim: d,
        mode,
        particles: vec![0.0; horizon * n * d],
        log_weights: vec![0.0; horizon * n],
        ancestors: vec![0; horizon.saturating_sub(1) * n],
        log_z_terms: Vec::with_capacity(horizon),
        final_log_weights: Vec::new(),
    };
    let mut cumulative = vec![0.0; n];
    let mut prev_lse = (n as f64).ln();
    let ln_n = (n as f64).ln();

    for t in 0..horizon {
        let y = data.y(t);
        if t > 0 {
            let range = (t - 1) * n..t * n;
            match (ancestors, mode) {
                (Some(a), _) => sys.ancestors[range.clone()].copy_from_slice(&a[range]),
                (None, ResamplingMode::EveryStep) => {
                    let logw = sys.log_weights[(t - 1) * n..t * n].to_vec();
                    resample_with_uniforms(
                        &logw,
                        &noise.ancestor_uniforms[range.clone()],
                        t - 1,
                        &mut sys.ancestors[range],
                    )?;
                }
                (None, ResamplingMode::Never) => {
                    for (i, a) in sys.ancestors[range].iter_mut().enumerate() {
                        *a = i;
                    }
                }
            }
        }
        let (done, rest) = sys.particles.split_at_mut(t * n * d);
        for i in 0..n {
            let x_prev = (t > 0).then(|| {
                let a = sys.ancestors[(t - 1) * n + i];
                &done[((t - 1) * n + a) * d..((t - 1) * n + a + 1) * d]
            });
            let x = &mut rest[i * d..(i + 1) * d];
            family.sample(model, params, t, y, x_prev, noise.eps(t, i), x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteSample { particle: i, t });
            }
            let lw = incremental_log_weight(model, family, params, t, y, x_prev, x)?;
            if lw == f64::INFINITY {
                return Err(Error::Numerical { t, msg: format!("infinite weight for particle {i}") });
            }
            sys.log_weights[t * n + i] = lw;
        }
        let step = &sys.log_weights[t * n..(t + 1) * n];
        match mode {
            ResamplingMode::EveryStep => {
                let lse = log_sum_exp(step);
                if lse == f64::NEG_INFINITY {
                    return Err(Error::WeightCollapse { t });
                }
                sys.log_z_terms.push(lse - ln_n);
            }
            ResamplingMode::Never => {
                for (c, &w) in cumulative.iter_mut().zip(step) {
                    *c += w;
                }
                let lse = log_sum_exp(&cumulative);
                if lse == f64::NEG_INFINITY {
                    return Err(Error::WeightCollapse { t });
                }
                sys.log_z_terms.push(lse - prev_lse);
                prev_lse = lse;
            }
        }
    }

    sys.final_log_weights = match mode {
        ResamplingMode::EveryStep => sys.log_weights[(horizon - 1) * n..].to_vec(),
        ResamplingMode::Never => cumulative,
    };
    let (chosen_index, trajectory) = sample_trajectory_with(&sys, noise.final_uniform)?;
    let log_z_hat = sys.log_z();
    Ok(SmcRunResult {
        trajectory,
        chosen_index,
        log_z_hat,
        system: sys,
        noise,
    })
}

fn sample_trajectory_with(system: &ParticleSystem, u: f64) -> Result<(usize, Vec<f64>)> {
    let w = normalized(&system.final_log_weights, system.horizon().saturating_sub(1))?;
    let b = categorical(&w, u);
    Ok((b, system.backtrack(b)))
}

/// Draws `b_T` from the final weights and backtracks its path.
pub fn sample_trajectory<R: Rng + ?Sized>(system: &ParticleSystem, rng: &mut R) -> Result<(usize, Vec<f64>)> {
    sample_trajectory_with(system, rng.random())
}

pub fn log_marginal_estimate(result: &SmcRunResult) -> f64 {
    result.log_z_hat
}

/// Monte Carlo estimate of the density of the returned sample at `x` for a
/// single-step model: `p(x, y) · E[1 / ((w(x) + Σ_{j≥2} w(x^j)) / N)]`.
#[allow(clippy::too_many_arguments)]
pub fn vis_density<R: Rng + ?Sized>(
    model: &dyn StateSpaceModel,
    y: &[f64],
    family: &dyn ProposalFamily,
    params: &[f64],
    num_particles: usize,
    x: &[f64],
    n_mc: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_mc < 1 {
        return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
    }
    if num_particles == 0 {
        return Err(Error::InvalidArgument("need at least one particle".into()));
    }
    let d = model.state_dim();
    let log_joint = model.log_transition(None, x) + model.log_observation(x, y);
    let log_wx = incremental_log_weight(model, family, params, 0, y, None, x)?;
    if !log_wx.is_finite() {
        return Err(Error::InvalidArgument("proposal density is zero at the evaluation point".into()));
    }
    let ln_n = (num_particles as f64).ln();
    let mut logw = vec![0.0; num_particles];
    let mut eps = vec![0.0; d];
    let mut xj = vec![0.0; d];
    let mut total = 0.0;
    for _ in 0..n_mc {
        logw[0] = log_wx;
        for w in logw.iter_mut().skip(1) {
            fill_standard_normal(rng, &mut eps);
            family.sample(model, params, 0, y, None, &eps, &mut xj);
            *w = incremental_log_weight(model, family, params, 0, y, None, &xj)?;
        }
        total += (log_joint - (log_sum_exp(&logw) - ln_n)).exp();
    }
    Ok(total / n_mc as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{lgssm_log_marginal, LgssmModel};
    use crate::proposals::{BootstrapProposal, LgssmOptimalProposal, ScalarMeanShift};
    use crate::rng::stream_rng;

    fn scalar() -> LgssmModel {
        LgssmModel::scalar(0.5, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn one_hot_weights_pick_the_survivor() {
        let mut rng = stream_rng(1, 0);
        let a = resample_ancestors(&[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0], &mut rng).unwrap();
        assert_eq!(a, vec![2, 2, 2]);
    }

    #[test]
    fn all_negative_infinite_weights_collapse() {
        let mut rng = stream_rng(1, 0);
        let r = resample_ancestors(&[f64::NEG_INFINITY; 3], &mut rng);
        assert!(matches!(r, Err(Error::WeightCollapse { .. })));
    }

    #[test]
    fn uniform_resampling_frequencies() {
        let mut rng = stream_rng(2, 0);
        let mut counts = [0usize; 4];
        for _ in 0..25_000 {
            for a in resample_ancestors(&[0.0; 4], &mut rng).unwrap() {
                counts[a] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / 1e5;
            assert!((0.24..=0.26).contains(&f), "{f}");
        }
    }

    #[test]
    fn weighted_resampling_frequency() {
        let mut rng = stream_rng(3, 0);
        let mut hits = 0usize;
        for _ in 0..50_000 {
            hits += resample_ancestors(&[0.0, 3f64.ln()], &mut rng).unwrap().iter().filter(|&&a| a == 1).count();
        }
        let f = hits as f64 / 1e5;
        let se = (0.75f64 * 0.25 / 1e5).sqrt();
        assert!((f - 0.75).abs() < 3.0 * se, "{f}");
    }

    #[test]
    fn single_particle_is_the_proposal_rollout() {
        let m = scalar();
        let data = Dataset::from_rows(&[vec![0.3], vec![-1.0], vec![0.8]]).unwrap();
        for mode in [ResamplingMode::EveryStep, ResamplingMode::Never] {
            let r = run_smc(&m, &data, &ScalarMeanShift, &[0.4], 1, mode, &mut stream_rng(4, 0)).unwrap();
            let mut x_prev = 0.0;
            let mut total = 0.0;
            for t in 0..3 {
                let x = 0.4 + 0.5 * x_prev + r.noise.eps(t, 0)[0];
                assert!((r.trajectory[t] - x).abs() < 1e-14);
                let prev = (t > 0).then_some([x_prev]);
                total += incremental_log_weight(&m, &ScalarMeanShift, &[0.4], t, data.y(t), prev.as_ref().map(|p| &p[..]), &[x]).unwrap();
                x_prev = x;
            }
            assert!((r.log_z_hat - total).abs() < 1e-12);
        }
    }

    #[test]
    fn single_particle_bootstrap_estimate_is_the_likelihood() {
        let m = scalar();
        let data = Dataset::from_rows(&[vec![0.3], vec![-1.0]]).unwrap();
        let r = run_smc(&m, &data, &BootstrapProposal::new(1), &[], 1, ResamplingMode::EveryStep, &mut stream_rng(5, 0)).unwrap();
        let expect: f64 = (0..2).map(|t| m.log_observation(&r.trajectory[t..t + 1], data.y(t))).sum();
        assert!((log_marginal_estimate(&r) - expect).abs() < 1e-12);
    }

    #[test]
    fn optimal_proposal_single_step_is_exact() {
        let m = scalar();
        let data = Dataset::from_rows(&[vec![1.7]]).unwrap();
        let opt = LgssmOptimalProposal::new(&m).unwrap();
        let exact = lgssm_log_marginal(&m, &data).unwrap();
        for n in [1, 5, 50] {
            for mode in [ResamplingMode::EveryStep, ResamplingMode::Never] {
                let r = run_smc(&m, &data, &opt, &[], n, mode, &mut stream_rng(n as u64, 1)).unwrap();
                assert!((r.log_z_hat - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_weights_give_their_log_sum() {
        // C = 0 and the prior as proposal: every weight is N(y; 0, R).
        let m = LgssmModel::scalar(0.5, 1.0, 0.0, 1.0).unwrap();
        let data = Dataset::from_rows(&[vec![0.5], vec![-2.0], vec![1.0]]).unwrap();
        let r = run_smc(&m, &data, &BootstrapProposal::new(1), &[], 7, ResamplingMode::EveryStep, &mut stream_rng(6, 0)).unwrap();
        let expect: f64 = data.rows().map(|y| crate::linalg::normal_logpdf(y[0], 0.0, 1.0)).sum();
        assert!((r.log_z_hat - expect).abs() < 1e-12);
    }

    #[test]
    fn backtracking_follows_ancestors() {
        let sys = ParticleSystem {
            num_particles: 2,
            dim: 1,
            mode: ResamplingMode::EveryStep,
            particles: vec![10.0, 20.0, 11.0, 21.0],
            log_weights: vec![0.0; 4],
            ancestors: vec![1, 1],
            log_z_terms: vec![0.0, 0.0],
            final_log_weights: vec![0.0, f64::NEG_INFINITY],
        };
        assert_eq!(sys.backtrack(0), vec![20.0, 11.0]);
        let (b, path) = sample_trajectory(&sys, &mut stream_rng(0, 0)).unwrap();
        assert_eq!((b, path), (0, vec![20.0, 11.0]));
    }

    #[test]
    fn replay_is_bit_exact() {
        let m = scalar();
        let data = Dataset::from_rows(&[vec![0.3], vec![-1.0], vec![2.0], vec![0.1]]).unwrap();
        for mode in [ResamplingMode::EveryStep, ResamplingMode::Never] {
            let r = run_smc(&m, &data, &ScalarMeanShift, &[0.2], 16, mode, &mut stream_rng(7, 0)).unwrap();
            let again = run_with_noise(&m, &data, &ScalarMeanShift, &[0.2], mode, r.noise.clone()).unwrap();
            assert_eq!(r, again);
            assert_eq!(r.log_z_hat.to_bits(), r.system.log_z_terms.iter().sum::<f64>().to_bits());
            assert_eq!(r.system.log_z_terms.len(), 4);
        }
    }

    #[test]
    fn never_mode_is_the_importance_weighted_bound() {
        let m = scalar();
        let data = Dataset::from_rows(&[vec![0.3], vec![-1.0], vec![2.0]]).unwrap();
        let r = run_smc(&m, &data, &ScalarMeanShift, &[0.2], 8, ResamplingMode::Never, &mut stream_rng(8, 0)).unwrap();
        assert!(r.system.ancestors.chunks(8).all(|a| a.iter().enumerate().all(|(i, &j)| i == j)));
        let cum: Vec<f64> = (0..8).map(|i| (0..3).map(|t| r.system.step_log_weights(t)[i]).sum()).collect();
        let expect = log_sum_exp(&cum) - 8f64.ln();
        assert!((r.log_z_hat - expect).abs() < 1e-12);
    }

    #[test]
    fn input_validation() {
        let m = scalar();
        let data = Dataset::from_rows(&[vec![0.3]]).unwrap();
        let mut rng = stream_rng(0, 0);
        assert!(matches!(
            run_smc(&m, &data, &ScalarMeanShift, &[0.2], 0, ResamplingMode::EveryStep, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            run_smc(&m, &data, &ScalarMeanShift, &[0.2, 1.0], 2, ResamplingMode::EveryStep, &mut rng),
            Err(Error::Dimension(_))
        ));
        let wide = Dataset::from_rows(&[vec![0.3, 0.1]]).unwrap();
        assert!(matches!(
            run_smc(&m, &wide, &ScalarMeanShift, &[0.2], 2, ResamplingMode::EveryStep, &mut rng),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn vis_density_with_one_particle_is_the_proposal() {
        let m = crate::models::BimodalModel;
        let mut rng = stream_rng(9, 0);
        for x in [-1.5, 0.0, 2.0] {
            let q = vis_density(&m, &[1.5], &ScalarMeanShift, &[0.3], 1, &[x], 3, &mut rng).unwrap();
            let r = ScalarMeanShift.log_density(&m, &[0.3], 0, &[1.5], None, &[x]).exp();
            assert!((q - r).abs() < 1e-12 * r.max(1.0));
        }
        assert!(vis_density(&m, &[1.5], &ScalarMeanShift, &[0.3], 1, &[0.0], 0, &mut rng).is_err());
    }
}
