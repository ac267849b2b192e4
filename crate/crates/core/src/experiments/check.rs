//! Named model/family factories for gradient checks and exact oracles.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gradients::{gradient_check, GradCheck};
use crate::models::{
    grid_log_normalizer, linspace, lgssm_log_marginal, simulate_dataset, BimodalModel, CKind, Dataset, LgssmModel,
    StateSpaceModel, StochVolModel, ToyQuadraticModel,
};
use crate::proposals::{PerStepAffineDiagonal, PriorTiltedGaussian, ProposalFamily, ScalarMeanShift};
use crate::rng::stream_rng;
use crate::smc::ResamplingMode;

pub const GRADCHECK_FAMILIES: [&str; 3] = ["scalar_mean_shift", "per_step_affine", "prior_tilted"];
pub const GRADCHECK_MODELS: [&str; 5] = ["scalar_lgssm", "lgssm", "stochvol", "toy_quadratic", "bimodal"];

/// Whether `family` has analytic gradients on `model`.
pub fn gradcheck_supported(family: &str, model: &str) -> bool {
    match family {
        "scalar_mean_shift" => matches!(model, "scalar_lgssm" | "toy_quadratic" | "bimodal"),
        "per_step_affine" => GRADCHECK_MODELS.contains(&model),
        "prior_tilted" => matches!(model, "scalar_lgssm" | "lgssm" | "stochvol" | "toy_quadratic" | "bimodal"),
        _ => false,
    }
}

fn random_model<R: Rng>(name: &str, rng: &mut R) -> Result<Box<dyn StateSpaceModel>> {
    Ok(match name {
        "scalar_lgssm" => Box::new(LgssmModel::scalar(
            rng.random_range(-0.9..0.9),
            rng.random_range(0.2..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(0.2..2.0),
        )?),
        "lgssm" => Box::new(LgssmModel::banded(
            3,
            2,
            rng.random_range(0.2..0.6),
            rng.random_range(0.1..1.0),
            rng.random_range(0.3..1.5),
            CKind::Dense,
            rng.random(),
        )?),
        "stochvol" => {
            let mut v = |lo: f64, hi: f64| (0..2).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
            let (mu, phi, q, beta) = (v(-0.5, 0.5), v(0.5, 0.98), v(0.05, 0.5), v(0.5, 1.5));
            Box::new(StochVolModel::new(mu, phi, q, beta)?)
        }
        "toy_quadratic" => Box::new(ToyQuadraticModel),
        "bimodal" => Box::new(BimodalModel),
        other => return Err(Error::Config(format!("unknown model `{other}`"))),
    })
}

fn random_family<R: Rng>(
    name: &str,
    model: &dyn StateSpaceModel,
    horizon: usize,
    rng: &mut R,
) -> Result<(Box<dyn ProposalFamily>, Vec<f64>)> {
    let d = model.state_dim();
    let mut jitter = |mut p: Vec<f64>| {
        for v in &mut p {
            *v += rng.random_range(-0.4..0.4);
        }
        p
    };
    Ok(match name {
        "scalar_mean_shift" => (Box::new(ScalarMeanShift), jitter(vec![0.0])),
        "per_step_affine" => {
            let a = nalgebra::DMatrix::from_fn(d, d, |i, j| if i == j { 0.5 } else { 0.1 });
            let fam = PerStepAffineDiagonal::new(a, horizon)?;
            let p = jitter(fam.prior_init(model)?.0);
            (Box::new(fam), p)
        }
        "prior_tilted" => {
            let fam = PriorTiltedGaussian::new(d, horizon);
            let p = jitter(fam.uniform_init(0.0, 1.0).0);
            (Box::new(fam), p)
        }
        other => return Err(Error::Config(format!("unknown family `{other}`"))),
    })
}

/// Worst [`GradCheck`] over `configs` random models, parameters, data and
/// sweeps (alternating resampling modes). Central differences use step
/// `1e-5`.
pub fn gradcheck_suite(family: &str, model: &str, configs: usize, seed: u64) -> Result<GradCheck> {
    if !GRADCHECK_FAMILIES.contains(&family) {
        return Err(Error::Config(format!("unknown family `{family}`")));
    }
    if !GRADCHECK_MODELS.contains(&model) {
        return Err(Error::Config(format!("unknown model `{model}`")));
    }
    if !gradcheck_supported(family, model) {
        return Err(Error::UnsupportedPair { family: family.into(), model: model.into() });
    }
    let mut worst = GradCheck { pathwise: 0.0, score: 0.0, coordinates: 0 };
    for k in 0..configs as u64 {
        let mut rng = stream_rng(seed, k);
        let m = random_model(model, &mut rng)?;
        let horizon = if model == "bimodal" { 1 } else { 4 };
        let (fam, params) = random_family(family, m.as_ref(), horizon, &mut rng)?;
        let (data, _) = simulate_dataset(m.as_ref(), horizon, rng.random())?;
        let mode = if k % 2 == 0 { ResamplingMode::EveryStep } else { ResamplingMode::Never };
        let c = gradient_check(m.as_ref(), &data, fam.as_ref(), &params, 3, mode, rng.random(), 1e-5)?;
        worst.pathwise = worst.pathwise.max(c.pathwise);
        worst.score = worst.score.max(c.score);
        worst.coordinates = worst.coordinates.max(c.coordinates);
    }
    Ok(worst)
}

/// Exact `log p(y_{1:T})` for a named model. `overrides` are `key=value`
/// model settings:
///
/// - `scalar_lgssm`: `a`, `q`, `c`, `r` (defaults 0.5, 1, 1, 1);
/// - `lgssm`: `state_dim`, `alpha`, `q_var`, `r_var`, `c_kind`, `model_seed`
///   (`obs_dim` is taken from the data);
/// - `toy_quadratic`, `bimodal`: none (bimodal needs one row).
pub fn exact_log_marginal(model: &str, data: &Dataset, overrides: &[(String, String)]) -> Result<f64> {
    let get = |key: &str, default: f64| -> Result<f64> {
        match overrides.iter().find(|(k, _)| k == key) {
            Some((_, v)) => v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
            None => Ok(default),
        }
    };
    let allowed: &[&str] = match model {
        "scalar_lgssm" => &["a", "q", "c", "r"],
        "lgssm" => &["state_dim", "alpha", "q_var", "r_var", "c_kind", "model_seed"],
        "toy_quadratic" | "bimodal" => &[],
        "stochvol" => return Err(Error::Config("stochvol has no exact oracle".into())),
        other => return Err(Error::Config(format!("unknown model `{other}`"))),
    };
    if let Some((k, _)) = overrides.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
        return Err(Error::Config(format!("key `{k}` does not apply to {model}")));
    }
    match model {
        "scalar_lgssm" => {
            let m = LgssmModel::scalar(get("a", 0.5)?, get("q", 1.0)?, get("c", 1.0)?, get("r", 1.0)?)?;
            lgssm_log_marginal(&m, data)
        }
        "lgssm" => {
            let c_kind = match overrides.iter().find(|(k, _)| k == "c_kind").map(|(_, v)| v.as_str()) {
                None | Some("sparse") => CKind::Sparse,
                Some("dense") => CKind::Dense,
                Some(v) => return Err(Error::Config(format!("c_kind must be sparse or dense, got `{v}`"))),
            };
            let dx = get("state_dim", 10.0)?;
            if dx < 1.0 || dx.fract() != 0.0 {
                return Err(Error::Config("state_dim must be a positive integer".into()));
            }
            let seed = get("model_seed", 1.0)?;
            let m = LgssmModel::banded(
                dx as usize,
                data.obs_dim(),
                get("alpha", 0.42)?,
                get("q_var", 1.0)?,
                get("r_var", 1.0)?,
                c_kind,
                seed as u64,
            )?;
            lgssm_log_marginal(&m, data)
        }
        "toy_quadratic" => ToyQuadraticModel.log_marginal(data),
        _ => {
            if data.len() != 1 || data.obs_dim() != 1 {
                return Err(Error::Config("bimodal needs exactly one scalar observation".into()));
            }
            let y = data.y(0)[0];
            grid_log_normalizer(|x| BimodalModel.log_joint(x, y), &linspace(-12.0, 12.0, 24_001))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_supported_pair_passes_a_few_configs() {
        for f in GRADCHECK_FAMILIES {
            for m in GRADCHECK_MODELS {
                if gradcheck_supported(f, m) {
                    let c = gradcheck_suite(f, m, 4, 3).unwrap();
                    assert!(c.pathwise < 1e-6 && c.score < 1e-6, "{f}/{m}: {c:?}");
                } else {
                    assert!(gradcheck_suite(f, m, 1, 0).is_err());
                }
            }
        }
        assert!(gradcheck_suite("nope", "lgssm", 1, 0).unwrap_err().is_config());
    }

    #[test]
    fn oracle_defaults_and_errors() {
        let d = Dataset::from_rows(&[vec![0.3], vec![-0.1]]).unwrap();
        let m = LgssmModel::scalar(0.5, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(exact_log_marginal("scalar_lgssm", &d, &[]).unwrap(), lgssm_log_marginal(&m, &d).unwrap());
        assert!(exact_log_marginal("stochvol", &d, &[]).unwrap_err().is_config());
        assert!(exact_log_marginal("scalar_lgssm", &d, &[("zz".into(), "1".into())]).unwrap_err().is_config());
        assert!(exact_log_marginal("bimodal", &d, &[]).unwrap_err().is_config());
        let one = Dataset::from_rows(&[vec![1.5]]).unwrap();
        assert!(exact_log_marginal("bimodal", &one, &[]).unwrap().is_finite());
    }
}
