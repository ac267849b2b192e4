//! Acceptance criteria 1 to 12. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4`.

use std::time::{Duration, Instant};

use vsmc::experiments::{
    exact_log_marginal, gradcheck_suite, gradcheck_supported, run_experiment, ExperimentConfig, ExperimentId,
    ExperimentOutput, GRADCHECK_FAMILIES, GRADCHECK_MODELS,
};
use vsmc::gradients::{mean_and_se, surrogate_elbo};
use vsmc::models::{lgssm_log_marginal, simulate_dataset, CKind, Dataset, LgssmModel, StateSpaceModel, ToyQuadraticModel};
use vsmc::proposals::{
    BootstrapProposal, LgssmOptimalProposal, PerStepAffineDiagonal, PriorTiltedGaussian, ProposalFamily,
    ScalarMeanShift,
};
use vsmc::rng::stream_rng;
use vsmc::smc::{run_smc, ResamplingMode};

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict { ok, detail: detail.into() }
}

fn within(a: (f64, f64), b: (f64, f64), k: f64) -> bool {
    (a.0 - b.0).abs() <= k * (a.1 * a.1 + b.1 * b.1).sqrt()
}

fn run(id: ExperimentId, dir: &std::path::Path, edit: impl FnOnce(&mut ExperimentConfig)) -> ExperimentOutput {
    let mut c = ExperimentConfig::defaults(id);
    c.output = dir.join(id.as_str());
    edit(&mut c);
    run_experiment(&c).unwrap_or_else(|e| panic!("{id}: {e}"))
}

fn elbo(out: &ExperimentOutput, method: &str, n: usize, t: usize) -> (f64, f64) {
    let r = out.get(method, n, t, "elbo").unwrap_or_else(|| panic!("no elbo row for {method} N={n}"));
    (r.value, r.std_err.unwrap_or(0.0))
}

fn c1() -> Verdict {
    let model = LgssmModel::scalar(0.5, 1.0, 1.0, 1.0).unwrap();
    let (data, _) = simulate_dataset(&model, 5, 0).unwrap();
    let z = lgssm_log_marginal(&model, &data).unwrap().exp();
    let bpf = BootstrapProposal::new(1);
    let mut ok = true;
    let mut detail = format!("Z={z:.5e}");
    for n in [2, 8, 32] {
        let zs: Vec<f64> = (0..20_000)
            .map(|k| {
                let mut rng = stream_rng(1, k);
                run_smc(&model, &data, &bpf, &[], n, ResamplingMode::EveryStep, &mut rng).unwrap().log_z_hat.exp()
            })
            .collect();
        let e = mean_and_se(&zs);
        let dev = (e.mean - z) / e.std_err;
        ok &= dev.abs() <= 3.0;
        detail += &format!("; N={n}: {:.5e} ({dev:+.2} SE)", e.mean);
    }
    verdict(ok, detail)
}

type Case = (String, Box<dyn StateSpaceModel>, Dataset, Box<dyn ProposalFamily>, Vec<f64>, f64);

fn bound_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let scalar = LgssmModel::scalar(0.5, 1.0, 1.0, 1.0).unwrap();
    let (sd, _) = simulate_dataset(&scalar, 5, 2).unwrap();
    let slp = lgssm_log_marginal(&scalar, &sd).unwrap();
    let affine = PerStepAffineDiagonal::new(scalar.a().clone(), 5).unwrap();
    let affine_init = affine.prior_init(&scalar).unwrap().0;
    let tilt = PriorTiltedGaussian::new(1, 5);
    let tilt_init = tilt.uniform_init(0.3, 0.8).0;
    let families: Vec<(&str, Box<dyn ProposalFamily>, Vec<f64>)> = vec![
        ("bpf", Box::new(BootstrapProposal::new(1)), vec![]),
        ("optimal", Box::new(LgssmOptimalProposal::new(&scalar).unwrap()), vec![]),
        ("mean_shift(-1)", Box::new(ScalarMeanShift), vec![-1.0]),
        ("mean_shift(1)", Box::new(ScalarMeanShift), vec![1.0]),
        ("per_step_affine", Box::new(affine), affine_init),
        ("prior_tilted", Box::new(tilt), tilt_init),
    ];
    for (name, fam, p) in families {
        cases.push((format!("scalar_lgssm/{name}"), Box::new(scalar.clone()), sd.clone(), fam, p, slp));
    }

    let lg = LgssmModel::banded(3, 2, 0.42, 0.5, 1.0, CKind::Dense, 5).unwrap();
    let (ld, _) = simulate_dataset(&lg, 6, 3).unwrap();
    let llp = lgssm_log_marginal(&lg, &ld).unwrap();
    let affine = PerStepAffineDiagonal::new(lg.a().clone(), 6).unwrap();
    let affine_init = affine.prior_init(&lg).unwrap().0;
    let families: Vec<(&str, Box<dyn ProposalFamily>, Vec<f64>)> = vec![
        ("bpf", Box::new(BootstrapProposal::new(3)), vec![]),
        ("optimal", Box::new(LgssmOptimalProposal::new(&lg).unwrap()), vec![]),
        ("per_step_affine", Box::new(affine), affine_init),
    ];
    for (name, fam, p) in families {
        cases.push((format!("lgssm/{name}"), Box::new(lg.clone()), ld.clone(), fam, p, llp));
    }

    let td = Dataset::constant(&[3.0], 5).unwrap();
    let tlp = ToyQuadraticModel.log_marginal(&td).unwrap();
    let ind = PerStepAffineDiagonal::independent(1, 5);
    let ind_init = ind.prior_init(&ToyQuadraticModel).unwrap().0;
    let tilt = PriorTiltedGaussian::new(1, 5);
    let tilt_init = tilt.uniform_init(1.0, 1.0).0;
    let families: Vec<(&str, Box<dyn ProposalFamily>, Vec<f64>)> = vec![
        ("mean_shift(0.5)", Box::new(ScalarMeanShift), vec![0.5]),
        ("per_step_affine", Box::new(ind), ind_init),
        ("prior_tilted", Box::new(tilt), tilt_init),
    ];
    for (name, fam, p) in families {
        cases.push((format!("toy_quadratic/{name}"), Box::new(ToyQuadraticModel), td.clone(), fam, p, tlp));
    }

    let bd = Dataset::constant(&[1.5], 1).unwrap();
    let blp = exact_log_marginal("bimodal", &bd, &[]).unwrap();
    let tilt = PriorTiltedGaussian::new(1, 1);
    let tilt_init = tilt.uniform_init(1.0, 2.0).0;
    let families: Vec<(&str, Box<dyn ProposalFamily>, Vec<f64>)> = vec![
        ("bpf", Box::new(BootstrapProposal::new(1)), vec![]),
        ("mean_shift(0)", Box::new(ScalarMeanShift), vec![0.0]),
        ("prior_tilted", Box::new(tilt), tilt_init),
    ];
    for (name, fam, p) in families {
        cases.push((format!("bimodal/{name}"), Box::new(vsmc::models::BimodalModel), bd.clone(), fam, p, blp));
    }
    cases
}

fn c2() -> Verdict {
    let mut count = 0;
    let mut worst = (f64::NEG_INFINITY, String::new());
    for (name, model, data, fam, p, log_p) in bound_cases() {
        for n in [1, 4] {
            for mode in [ResamplingMode::EveryStep, ResamplingMode::Never] {
                let e = surrogate_elbo(model.as_ref(), &data, fam.as_ref(), &p, n, mode, 2000, 9).unwrap();
                let z = (e.mean - log_p) / e.std_err;
                if z > worst.0 {
                    worst = (z, format!("{name} N={n} {}", mode.as_str()));
                }
                count += 1;
            }
        }
    }
    verdict(
        count >= 20 && worst.0 <= 3.0,
        format!("{count} configs; closest: {} at {:+.2} SE", worst.1, worst.0),
    )
}

fn c3(dir: &std::path::Path) -> Verdict {
    let out = run(ExperimentId::VisBimodal, dir, |_| {});
    let tv = |m: &str| out.rows(m, "tv_histogram").next().unwrap().value;
    let (tv10, tv1) = (tv("vis"), tv("vis_n1"));
    verdict(tv10 < 0.03 && tv1 < 0.02, format!("TV N=10 {tv10:.4} (< 0.03), N=1 {tv1:.4} (< 0.02)"))
}

fn c4() -> Verdict {
    let mut ok = true;
    let mut worst = (0.0f64, String::new());
    let mut pairs = 0;
    for f in GRADCHECK_FAMILIES {
        for m in GRADCHECK_MODELS {
            if !gradcheck_supported(f, m) {
                continue;
            }
            pairs += 1;
            let c = gradcheck_suite(f, m, 100, 4).unwrap();
            let e = c.pathwise.max(c.score);
            ok &= e < 1e-6;
            if e > worst.0 {
                worst = (e, format!("{f}/{m}"));
            }
        }
    }
    verdict(ok, format!("{pairs} family/model pairs x 100 configs; worst rel err {:.2e} ({})", worst.0, worst.1))
}

fn grad_stat(out: &ExperimentOutput, method: &str, n: usize, lam: f64, q: &str) -> (f64, f64) {
    let setting = format!("lambda={lam:?}");
    let r = out
        .rows(method, q)
        .find(|r| r.particles == n && r.setting == setting)
        .unwrap_or_else(|| panic!("no {q} row for {method} N={n} {setting}"));
    (r.value, r.std_err.unwrap_or(0.0))
}

fn c5(dir: &std::path::Path) -> Verdict {
    let out = run(ExperimentId::GradBiasScalar, dir, |c| {
        c.grad_seeds = 200_000;
        c.raw_gradients = false;
    });
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut cv_ratio = 0.0f64;
    for n in [2, 4] {
        for lam in [-1.0, 0.0, 1.0] {
            let g = |m: &str| grad_stat(&out, m, n, lam, "grad_mean");
            let ests = [g("rep_plus_score_rb"), g("score_full"), g("rep_plus_loo")];
            for i in 0..3 {
                for j in i + 1..3 {
                    ok &= within(ests[i], ests[j], 3.0);
                    let (a, b) = (ests[i], ests[j]);
                    worst = worst.max((a.0 - b.0).abs() / (a.1 * a.1 + b.1 * b.1).sqrt());
                }
            }
            let (rb, cv) = (g("rep_plus_score_rb"), g("rep_plus_score_rb_cv"));
            ok &= within(rb, cv, 3.0);
            worst = worst.max((rb.0 - cv.0).abs() / (rb.1 * rb.1 + cv.1 * cv.1).sqrt());
            let v = |m: &str| grad_stat(&out, m, n, lam, "grad_var").0;
            let ratio = v("rep_plus_score_rb_cv") / v("rep_plus_score_rb");
            ok &= ratio < 1.0;
            cv_ratio = cv_ratio.max(ratio);
        }
    }
    verdict(ok, format!("max pairwise deviation {worst:.2} SE (<= 3); max var(cv)/var(no cv) {cv_ratio:.3} (< 1)"))
}

fn c6(dir: &std::path::Path) -> Verdict {
    let out = run(ExperimentId::GradBiasScalar, dir, |c| {
        c.output = dir.join("c6");
        c.grad_seeds = 10_000;
        c.raw_gradients = false;
    });
    let mut min_ratio = f64::INFINITY;
    for n in [2, 4] {
        for lam in [-1.0, 0.0, 1.0] {
            let v = |m: &str| grad_stat(&out, m, n, lam, "grad_var").0;
            min_ratio = min_ratio.min(v("score_full") / v("rep"));
        }
    }
    verdict(min_ratio >= 10.0, format!("min var(score_full)/var(rep) {min_ratio:.1} (>= 10)"))
}

fn c7(dir: &std::path::Path) -> Verdict {
    let out = run(ExperimentId::GradBiasLgssm, dir, |_| {});
    let q = |m: &str, k: &str| out.rows(m, k).next().unwrap().value;
    let (p_rep, p_rb) = (q("rep_only", "plateau"), q("rep_plus_score_rb", "plateau"));
    let (r_rep, r_rb) = (q("rep_only", "reach_iteration"), q("rep_plus_score_rb", "reach_iteration"));
    verdict(
        (p_rep - p_rb).abs() < 2.0 && r_rep < r_rb,
        format!("plateaus {p_rep:.2} vs {p_rb:.2}; reach iteration {r_rep} vs {r_rb}"),
    )
}

fn c8(dir: &std::path::Path) -> Verdict {
    let out = run(ExperimentId::Table1Proposals, dir, |_| {});
    let c = ExperimentConfig::defaults(ExperimentId::Table1Proposals);
    let (n, t) = (c.particles, c.horizon);
    let (bpf, opt, vsmc) = (elbo(&out, "BPF", n, t).0, elbo(&out, "OptimalSMC", n, t).0, elbo(&out, "VSMC", n, t).0);
    let truth = out.get("KalmanTruth", 0, t, "log_p").unwrap().value;
    verdict(
        bpf < opt && opt < vsmc && vsmc <= truth && truth - vsmc < 5.0,
        format!("BPF {bpf:.2} < Opt {opt:.2} < VSMC {vsmc:.2} <= Kalman {truth:.2}; gap {:.2} (< 5)", truth - vsmc),
    )
}

fn c9(dir: &std::path::Path) -> Verdict {
    let out = run(ExperimentId::StochvolVem, dir, |_| {});
    let t = out.summary.iter().find(|r| r.method == "vb").unwrap().horizon;
    let vb = elbo(&out, "vb", 1, t);
    let mut ok = true;
    let mut detail = format!("VB {:.2}", vb.0);
    let mut prev = f64::NEG_INFINITY;
    for n in [4, 8, 16] {
        let (iw, vs) = (elbo(&out, "iwae", n, t), elbo(&out, "vsmc", n, t));
        let sep = |a: (f64, f64), b: (f64, f64)| b.0 - a.0 > 3.0 * (a.1 * a.1 + b.1 * b.1).sqrt();
        ok &= sep(vb, iw) && sep(iw, vs) && vs.0 >= prev;
        prev = vs.0;
        detail += &format!("; N={n}: IWAE {:.2}, VSMC {:.2}", iw.0, vs.0);
    }
    verdict(ok, detail)
}

fn c10(dir: &std::path::Path) -> Verdict {
    let out = run(ExperimentId::StochvolNsweep, dir, |_| {});
    let t = out.summary.iter().find(|r| r.method == "vsmc").unwrap().horizon;
    let gain = |m: &str| elbo(&out, m, 256, t).0 - elbo(&out, m, 16, t).0;
    let (gv, gi) = (gain("vsmc"), gain("iwae"));
    verdict(gv > gi, format!("gain N=16 to 256: VSMC {gv:.2}, IWAE {gi:.2}"))
}

fn c11_12(dir: &std::path::Path) -> (Verdict, Verdict) {
    let out = run(ExperimentId::ScalingN2t, dir, |_| {});
    let gap = |m: &str, t: usize| out.rows(m, "gap_per_step").find(|r| r.horizon == t).unwrap().value;
    let ts = [2, 5, 10, 20, 50];
    let v2 = gap("vsmc", 2);
    let vsmc_ok = ts.iter().all(|&t| gap("vsmc", t) <= 2.0 * v2);
    let (i2, i50, vb50) = (gap("iwae", 2), gap("iwae", 50), gap("vb", 50));
    let iwae_grows = i50 > 2.0 * i2;
    let iwae_near_vb = (i50 - vb50).abs() <= 0.2 * vb50;
    let per_step: Vec<String> = ts.iter().map(|&t| format!("{:.3}", gap("vsmc", t))).collect();
    let c11 = verdict(
        vsmc_ok && iwae_grows && iwae_near_vb,
        format!(
            "VSMC per-step gaps [{}] within 2x of T=2: {vsmc_ok}; IWAE T=50/T=2 {:.2} (> 2): {iwae_grows}; \
             IWAE vs VB at T=50 {i50:.3} vs {vb50:.3} (within 20%): {iwae_near_vb}",
            per_step.join(", "),
            i50 / i2
        ),
    );
    let (vt, it) = (50.0 * gap("vsmc", 50), 50.0 * i50);
    let c12 = verdict(vt < 0.25 * it, format!("T=50 total gap VSMC {vt:.2} vs IWAE {it:.2} (ratio {:.3} < 0.25)", vt / it));
    (c11, c12)
}

const LIMITS: [u64; 13] = [0, 60, 120, 120, 60, 300, 60, 600, 600, 600, 300, 600, 600];

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |k: usize| wanted.is_empty() || wanted.contains(&k);
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut failed = Vec::new();
    let mut report = |k: usize, v: Verdict, elapsed: Duration| {
        let in_time = elapsed.as_secs() < LIMITS[k];
        let ok = v.ok && in_time;
        let time = format!("{:.1}s{}", elapsed.as_secs_f64(), if in_time { "" } else { " over limit" });
        println!("criterion {k:>2}: {} [{time}] {}", if ok { "PASS" } else { "FAIL" }, v.detail);
        if !ok {
            failed.push(k);
        }
    };
    let timed = |f: &mut dyn FnMut() -> Verdict| {
        let t0 = Instant::now();
        let v = f();
        (v, t0.elapsed())
    };
    let criteria: [(usize, &mut dyn FnMut() -> Verdict); 10] = [
        (1, &mut c1),
        (2, &mut c2),
        (3, &mut || c3(d)),
        (4, &mut c4),
        (5, &mut || c5(d)),
        (6, &mut || c6(d)),
        (7, &mut || c7(d)),
        (8, &mut || c8(d)),
        (9, &mut || c9(d)),
        (10, &mut || c10(d)),
    ];
    for (k, f) in criteria {
        if on(k) {
            let (v, e) = timed(f);
            report(k, v, e);
        }
    }
    if on(11) || on(12) {
        let t0 = Instant::now();
        let (v11, v12) = c11_12(d);
        let e = t0.elapsed();
        if on(11) {
            report(11, v11, e);
        }
        if on(12) {
            report(12, v12, e);
        }
    }
    if !failed.is_empty() {
        eprintln!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
