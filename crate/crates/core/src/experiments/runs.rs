//! One function per experiment id.

use super::io::{f, write_table};
use super::{plateau_and_reach, ExperimentConfig, Sink, SummaryRow};
use crate::error::Result;
use crate::gradients::{
    future_rewards, grad_rep_from_run, grad_score_full_from_run, grad_score_rb_from_run, leave_one_out_t2_from_run,
    mean_and_se, surrogate_elbo, ControlVariateState, EstimatorTag,
};
use crate::models::{
    grid_log_normalizer, linspace, lgssm_log_marginal, simulate_dataset, BimodalModel, Dataset, LgssmModel,
    StateSpaceModel, StochVolModel, ToyQuadraticModel,
};
use crate::optimize::{fit_vem, fit_vsmc, FitConfig, EVAL_SEED_OFFSET};
use crate::proposals::{
    BootstrapProposal, LgssmOptimalProposal, PerStepAffineDiagonal, PriorTiltedGaussian, ProposalFamily,
    ScalarMeanShift,
};
use crate::rng::stream_rng;
use crate::smc::{run_smc, sample_trajectory, vis_density, ResamplingMode};

use ResamplingMode::{EveryStep, Never};

const PILOT_OFFSET: u64 = 0x9170_0000;
const SAMPLE_OFFSET: u64 = 0x5a3e_0000;

fn fit_config(cfg: &ExperimentConfig, n: usize, mode: ResamplingMode, estimator: EstimatorTag) -> FitConfig {
    let mut fc = FitConfig::new(n, cfg.iterations, cfg.seed);
    fc.mode = mode;
    fc.estimator = estimator;
    fc.rule = cfg.step_rule();
    fc.anneal = cfg.anneal();
    fc.eval_every = cfg.eval_every;
    fc.eval_seeds = cfg.eval_seeds;
    fc
}

fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed.wrapping_add(EVAL_SEED_OFFSET)
}

fn elbo_row(method: &str, n: usize, t: usize, e: (f64, f64)) -> SummaryRow {
    SummaryRow::new(method, n, t, "elbo", e.0, Some(e.1))
}

/// VB, IWAE and VSMC on the toy model for each horizon in the grid.
pub(crate) fn toy(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let model = ToyQuadraticModel;
    for &t in &cfg.t_grid {
        let data = Dataset::constant(&[cfg.y_value], t)?;
        let log_p = model.log_marginal(&data)?;
        sink.row(SummaryRow::new("exact", 0, t, "log_p", log_p, None));
        let fam = PerStepAffineDiagonal::independent(1, t);
        let init = fam.prior_init(&model)?.0;
        let n = cfg.particles_for(t);
        for (method, n, mode) in [("vb", 1, EveryStep), ("iwae", n, Never), ("vsmc", n, EveryStep)] {
            let fit = fit_vsmc(&model, &data, &fam, &init, &fit_config(cfg, n, mode, EstimatorTag::RepOnly))?;
            sink.fit(method, n, t, fam.name(), &fit)?;
            let (e, se) = fit.final_elbo.unwrap_or((f64::NAN, f64::NAN));
            sink.row(elbo_row(method, n, t, (e, se)));
            sink.row(SummaryRow::new(method, n, t, "gap_per_step", (log_p - e) / t as f64, Some(se / t as f64)));
        }
    }
    Ok(())
}

/// Monte Carlo moments of every gradient estimator on the scalar model.
pub(crate) fn grad_bias_scalar(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    const FD_STEP: f64 = 0.05;
    let model = LgssmModel::scalar(0.5, 1.0, 1.0, 1.0)?;
    let (data, _) = simulate_dataset(&model, cfg.horizon, cfg.data_seed)?;
    let fam = ScalarMeanShift;
    let with_loo = cfg.horizon == 2;
    let t = cfg.horizon;
    let mut raw: Vec<Vec<String>> = Vec::new();
    for &n in &cfg.n_grid {
        for &lam in &cfg.lambdas {
            let p = [lam];
            let pilot = (cfg.grad_seeds / 10).max(100);
            let mut base = vec![0.0; t];
            for k in 0..pilot as u64 {
                let run = run_smc(&model, &data, &fam, &p, n, EveryStep, &mut stream_rng(cfg.seed.wrapping_add(PILOT_OFFSET), k))?;
                for (b, r) in base.iter_mut().zip(future_rewards(&run)) {
                    *b += r / pilot as f64;
                }
            }
            let mut fixed = ControlVariateState::Fixed(base);
            let mut names = vec!["rep", "score_rb", "rep_plus_score_rb", "rep_plus_score_rb_cv", "score_full", "finite_difference"];
            if with_loo {
                names.push("rep_plus_loo");
            }
            let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.grad_seeds); names.len()];
            for s in 0..cfg.grad_seeds as u64 {
                let run = run_smc(&model, &data, &fam, &p, n, EveryStep, &mut stream_rng(cfg.seed, s))?;
                let rep = grad_rep_from_run(&run, &model, &data, &fam, &p, false)?.grad_lambda[0];
                let rb = grad_score_rb_from_run(&run, &model, &data, &fam, &p, &mut ControlVariateState::Disabled)?.grad_lambda[0];
                let rb_cv = grad_score_rb_from_run(&run, &model, &data, &fam, &p, &mut fixed)?.grad_lambda[0];
                let full = grad_score_full_from_run(&run, &model, &data, &fam, &p)?.grad_lambda[0];
                let up = run_smc(&model, &data, &fam, &[lam + FD_STEP], n, EveryStep, &mut stream_rng(cfg.seed, s))?.log_z_hat;
                let down = run_smc(&model, &data, &fam, &[lam - FD_STEP], n, EveryStep, &mut stream_rng(cfg.seed, s))?.log_z_hat;
                let mut vals = vec![rep, rb, rep + rb, rep + rb_cv, full, (up - down) / (2.0 * FD_STEP)];
                if with_loo {
                    vals.push(rep + leave_one_out_t2_from_run(&run, &model, &data, &fam, &p)?.grad_lambda[0]);
                }
                for (k, v) in vals.into_iter().enumerate() {
                    cols[k].push(v);
                    if cfg.raw_gradients {
                        raw.push(vec![names[k].into(), n.to_string(), f(lam), s.to_string(), f(v)]);
                    }
                }
            }
            let setting = format!("lambda={lam:?}");
            for (name, col) in names.iter().zip(&cols) {
                let e = mean_and_se(col);
                let var = e.std_err.powi(2) * e.n as f64;
                sink.row(SummaryRow::new(name, n, t, "grad_mean", e.mean, Some(e.std_err)).with_setting(&setting));
                sink.row(SummaryRow::new(name, n, t, "grad_var", var, None).with_setting(&setting));
            }
        }
    }
    if cfg.raw_gradients {
        let path = sink.path("gradients.csv");
        write_table(&path, &["method", "particles", "lambda", "seed", "grad"], raw)?;
    }
    Ok(())
}

fn lgssm_setup(cfg: &ExperimentConfig) -> Result<(LgssmModel, Dataset, f64)> {
    let model = LgssmModel::banded(cfg.state_dim, cfg.obs_dim, cfg.alpha, cfg.q_var, cfg.r_var, cfg.c_kind, cfg.data_seed)?;
    let (data, _) = simulate_dataset(&model, cfg.horizon, cfg.data_seed)?;
    let log_p = lgssm_log_marginal(&model, &data)?;
    Ok((model, data, log_p))
}

/// Training curves with and without the ancestor score term.
pub(crate) fn grad_bias_lgssm(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let (model, data, log_p) = lgssm_setup(cfg)?;
    let (n, t) = (cfg.particles, cfg.horizon);
    sink.row(SummaryRow::new("kalman", 0, t, "log_p", log_p, None));
    let fam = PerStepAffineDiagonal::new(model.a().clone(), t)?;
    let init = fam.prior_init(&model)?.0;
    for est in [EstimatorTag::RepOnly, EstimatorTag::RepPlusScoreRB] {
        let fit = fit_vsmc(&model, &data, &fam, &init, &fit_config(cfg, n, EveryStep, est))?;
        sink.fit(est.as_str(), n, t, fam.name(), &fit)?;
        if let Some(e) = fit.final_elbo {
            sink.row(elbo_row(est.as_str(), n, t, e));
        }
        if let Some((plateau, reach)) = plateau_and_reach(&fit.trace, 5, 0.5) {
            sink.row(SummaryRow::new(est.as_str(), n, t, "plateau", plateau, None));
            sink.row(SummaryRow::new(est.as_str(), n, t, "reach_iteration", reach as f64, None));
        }
    }
    Ok(())
}

/// Bootstrap, locally optimal and learned proposals against the Kalman value.
pub(crate) fn table1(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let (model, data, log_p) = lgssm_setup(cfg)?;
    let (n, t) = (cfg.particles, cfg.horizon);
    let eval = |fam: &dyn ProposalFamily, p: &[f64]| {
        surrogate_elbo(&model, &data, fam, p, n, EveryStep, cfg.eval_seeds, eval_seed(cfg)).map(|e| (e.mean, e.std_err))
    };
    sink.row(elbo_row("BPF", n, t, eval(&BootstrapProposal::new(cfg.state_dim), &[])?));
    sink.row(elbo_row("OptimalSMC", n, t, eval(&LgssmOptimalProposal::new(&model)?, &[])?));
    let fam = PerStepAffineDiagonal::new(model.a().clone(), t)?;
    let init = fam.prior_init(&model)?.0;
    let fit = fit_vsmc(&model, &data, &fam, &init, &fit_config(cfg, n, EveryStep, cfg.estimator))?;
    sink.fit("VSMC", n, t, fam.name(), &fit)?;
    sink.row(elbo_row("VSMC", n, t, eval(&fam, &fit.lambda)?));
    sink.row(SummaryRow::new("KalmanTruth", 0, t, "log_p", log_p, None));
    Ok(())
}

/// Bin counts over `[lo, hi)` with `bins` equal bins; the last entry counts
/// samples outside.
fn histogram(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins + 1];
    let w = (hi - lo) / bins as f64;
    for &x in xs {
        let k = ((x - lo) / w).floor();
        if k >= 0.0 && (k as usize) < bins {
            h[k as usize] += 1;
        } else {
            h[bins] += 1;
        }
    }
    h
}

/// Total variation between a histogram and a density at bin centers.
pub fn tv_histogram(counts: &[usize], density_at_centers: &[f64], width: f64) -> f64 {
    let total: usize = counts.iter().sum();
    let bins = density_at_centers.len();
    let mut tv = 0.0;
    let mut inside = 0.0;
    for (c, q) in counts[..bins].iter().zip(density_at_centers) {
        tv += (*c as f64 / total as f64 - q * width).abs();
        inside += q * width;
    }
    tv += (counts[bins] as f64 / total as f64 - (1.0 - inside)).abs();
    0.5 * tv
}

/// Learned Gaussian proposal on the bimodal posterior; samples, densities
/// and histogram distances.
pub(crate) fn vis_bimodal(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    const LO: f64 = -5.0;
    const HI: f64 = 5.0;
    const BINS: usize = 100;
    let model = BimodalModel;
    let y = [cfg.y_value];
    let data = Dataset::constant(&y, 1)?;
    let fam = PerStepAffineDiagonal::independent(1, 1);
    let init = fam.prior_init(&model)?.0;
    let n = cfg.particles;
    let vis = fit_vsmc(&model, &data, &fam, &init, &fit_config(cfg, n, EveryStep, EstimatorTag::RepOnly))?;
    sink.fit("vis", n, 1, fam.name(), &vis)?;
    let vb = fit_vsmc(&model, &data, &fam, &init, &fit_config(cfg, 1, EveryStep, EstimatorTag::RepOnly))?;
    sink.fit("vb", 1, 1, fam.name(), &vb)?;
    let log_z = grid_log_normalizer(|x| model.log_joint(x, y[0]), &linspace(-12.0, 12.0, 24_001))?;
    sink.row(SummaryRow::new("exact", 0, 1, "log_p", log_z, None));
    for (m, n, fit) in [("vis", n, &vis), ("vb", 1, &vb)] {
        if let Some(e) = fit.final_elbo {
            sink.row(elbo_row(m, n, 1, e));
        }
    }

    let draw = |n: usize, stream: u64| -> Result<Vec<f64>> {
        (0..cfg.samples as u64)
            .map(|k| {
                let mut rng = stream_rng(cfg.seed.wrapping_add(SAMPLE_OFFSET + stream), k);
                let run = run_smc(&model, &data, &fam, &vis.lambda, n, EveryStep, &mut rng)?;
                Ok(sample_trajectory(&run.system, &mut rng)?.1[0])
            })
            .collect()
    };
    let xs_n = draw(n, 0)?;
    let xs_1 = draw(1, 1)?;

    let width = (HI - LO) / BINS as f64;
    let centers: Vec<f64> = (0..BINS).map(|b| LO + (b as f64 + 0.5) * width).collect();
    let mut rng = stream_rng(cfg.seed.wrapping_add(SAMPLE_OFFSET + 2), 0);
    let q_vis = centers
        .iter()
        .map(|&x| vis_density(&model, &y, &fam, &vis.lambda, n, &[x], cfg.n_mc, &mut rng))
        .collect::<Result<Vec<f64>>>()?;
    let r_dens = |lambda: &[f64], x: f64| fam.log_density(&model, lambda, 0, &y, None, &[x]).exp();
    let r_vis: Vec<f64> = centers.iter().map(|&x| r_dens(&vis.lambda, x)).collect();
    let r_vb: Vec<f64> = centers.iter().map(|&x| r_dens(&vb.lambda, x)).collect();
    let post: Vec<f64> = centers.iter().map(|&x| (model.log_joint(x, y[0]) - log_z).exp()).collect();

    let tv_n = tv_histogram(&histogram(&xs_n, LO, HI, BINS), &q_vis, width);
    let tv_1 = tv_histogram(&histogram(&xs_1, LO, HI, BINS), &r_vis, width);
    sink.row(SummaryRow::new("vis", n, 1, "tv_histogram", tv_n, None));
    sink.row(SummaryRow::new("vis_n1", 1, 1, "tv_histogram", tv_1, None));

    let samples = sink.path("samples.csv");
    let rows = xs_n.iter().map(|x| ("vis", n, x)).chain(xs_1.iter().map(|x| ("vis_n1", 1, x)));
    write_table(&samples, &["method", "particles", "x"], rows.map(|(m, n, x)| vec![m.into(), n.to_string(), f(*x)]))?;
    let density = sink.path("density.csv");
    write_table(
        &density,
        &["x", "posterior", "vis_density", "proposal", "vb_proposal"],
        (0..BINS).map(|b| vec![f(centers[b]), f(post[b]), f(q_vis[b]), f(r_vis[b]), f(r_vb[b])]),
    )
}

struct SvSetup {
    data: Dataset,
    init_model: StochVolModel,
    family: PriorTiltedGaussian,
    init: Vec<f64>,
}

fn sv_setup(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<SvSetup> {
    let (data, truth) = match &cfg.data {
        Some(path) => (super::load_matrix_csv(path)?, None),
        None => {
            let truth = StochVolModel::isotropic(cfg.state_dim, cfg.sv_mu, cfg.sv_phi, cfg.sv_q, cfg.sv_beta)?;
            let (data, _) = simulate_dataset(&truth, cfg.horizon, cfg.data_seed)?;
            (data, Some(truth))
        }
    };
    let path = sink.path("data.csv");
    super::write_matrix_csv(&path, &data)?;
    let d = data.obs_dim();
    let init_model = StochVolModel::isotropic(d, cfg.init_mu, cfg.init_phi, cfg.init_q, cfg.init_beta)?;
    let family = PriorTiltedGaussian::new(d, data.len());
    let init = family.uniform_init(0.0, 1.0).0;
    if let Some(truth) = &truth {
        let e = surrogate_elbo(truth, &data, &BootstrapProposal::new(d), &[], 1000, EveryStep, 20, eval_seed(cfg))?;
        sink.row(SummaryRow::new("truth_bpf", 1000, data.len(), "log_p_estimate", e.mean, Some(e.std_err)));
    }
    Ok(SvSetup { data, init_model, family, init })
}

fn sv_fit(
    cfg: &ExperimentConfig,
    sink: &mut Sink,
    s: &SvSetup,
    method: &str,
    n: usize,
    mode: ResamplingMode,
    est: EstimatorTag,
) -> Result<(Box<dyn StateSpaceModel>, Vec<f64>)> {
    let t = s.data.len();
    let fit = fit_vem(&s.init_model, &s.data, &s.family, &s.init, None, &fit_config(cfg, n, mode, est))?;
    sink.fit(method, n, t, s.family.name(), &fit)?;
    let theta = fit.theta.clone().unwrap_or_else(|| s.init_model.theta());
    Ok((s.init_model.with_theta(&theta)?, fit.lambda))
}

/// Joint model and proposal learning: structured VI, IWAE and VSMC.
pub(crate) fn stochvol_vem(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let s = sv_setup(cfg, sink)?;
    let t = s.data.len();
    let mut runs = vec![("vb", 1, EveryStep, EstimatorTag::RepOnly)];
    for &n in &cfg.n_grid {
        runs.push(("iwae", n, Never, EstimatorTag::RepOnly));
        runs.push(("vsmc", n, EveryStep, cfg.estimator));
    }
    for (method, n, mode, est) in runs {
        let (model, lambda) = sv_fit(cfg, sink, &s, method, n, mode, est)?;
        let e = surrogate_elbo(model.as_ref(), &s.data, &s.family, &lambda, n, mode, cfg.eval_seeds, eval_seed(cfg))?;
        sink.row(elbo_row(method, n, t, (e.mean, e.std_err)));
    }
    Ok(())
}

/// Train at one particle count, evaluate across the grid.
pub(crate) fn stochvol_nsweep(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let s = sv_setup(cfg, sink)?;
    let t = s.data.len();
    let setting = format!("trained_n={}", cfg.particles);
    for (method, mode, est) in [("iwae", Never, EstimatorTag::RepOnly), ("vsmc", EveryStep, cfg.estimator)] {
        let (model, lambda) = sv_fit(cfg, sink, &s, method, cfg.particles, mode, est)?;
        for &n in &cfg.n_grid {
            let e = surrogate_elbo(model.as_ref(), &s.data, &s.family, &lambda, n, mode, cfg.eval_seeds, eval_seed(cfg))?;
            sink.row(elbo_row(method, n, t, (e.mean, e.std_err)).with_setting(&setting));
        }
    }
    Ok(())
}
