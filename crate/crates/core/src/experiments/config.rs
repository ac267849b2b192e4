//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Every id accepts a fixed set of keys (see [`ExperimentId::keys`]);
//! unknown or inapplicable keys are errors. Lists are comma-separated.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gradients::EstimatorTag;
use crate::models::CKind;
use crate::optimize::StepRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentId {
    Fig1Toy,
    GradBiasScalar,
    GradBiasLgssm,
    Table1Proposals,
    VisBimodal,
    StochvolVem,
    StochvolNsweep,
    ScalingN2t,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 8] = [
        Self::Fig1Toy,
        Self::GradBiasScalar,
        Self::GradBiasLgssm,
        Self::Table1Proposals,
        Self::VisBimodal,
        Self::StochvolVem,
        Self::StochvolNsweep,
        Self::ScalingN2t,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fig1Toy => "fig1_toy",
            Self::GradBiasScalar => "grad_bias_scalar",
            Self::GradBiasLgssm => "grad_bias_lgssm",
            Self::Table1Proposals => "table1_proposals",
            Self::VisBimodal => "vis_bimodal",
            Self::StochvolVem => "stochvol_vem",
            Self::StochvolNsweep => "stochvol_nsweep",
            Self::ScalingN2t => "scaling_n2t",
        }
    }

    /// Keys accepted for this id, in serialization order.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            Self::Fig1Toy => &[
                "experiment", "output", "seed", "particles", "t_grid", "y_value", "iterations", "optimizer", "eta",
                "anneal_at", "anneal_factor", "eval_seeds",
            ],
            Self::ScalingN2t => &[
                "experiment", "output", "seed", "t_grid", "y_value", "iterations", "optimizer", "eta", "anneal_at",
                "anneal_factor", "eval_seeds",
            ],
            Self::GradBiasScalar => &[
                "experiment", "output", "seed", "data_seed", "horizon", "n_grid", "lambdas", "grad_seeds",
                "raw_gradients",
            ],
            Self::GradBiasLgssm => &[
                "experiment", "output", "seed", "data_seed", "state_dim", "obs_dim", "alpha", "q_var", "r_var",
                "c_kind", "horizon", "particles", "iterations", "optimizer", "eta", "anneal_at", "anneal_factor",
                "eval_every", "eval_seeds",
            ],
            Self::Table1Proposals => &[
                "experiment", "output", "seed", "data_seed", "state_dim", "obs_dim", "alpha", "q_var", "r_var",
                "c_kind", "horizon", "particles", "estimator", "iterations", "optimizer", "eta", "anneal_at",
                "anneal_factor", "eval_seeds",
            ],
            Self::VisBimodal => &[
                "experiment", "output", "seed", "y_value", "particles", "iterations", "optimizer", "eta", "samples",
                "n_mc", "eval_seeds",
            ],
            Self::StochvolVem => &[
                "experiment", "output", "seed", "data", "data_seed", "state_dim", "horizon", "sv_mu", "sv_phi", "sv_q",
                "sv_beta", "init_mu", "init_phi", "init_q", "init_beta", "n_grid", "estimator", "iterations",
                "optimizer", "eta", "anneal_at", "anneal_factor", "eval_seeds",
            ],
            Self::StochvolNsweep => &[
                "experiment", "output", "seed", "data", "data_seed", "state_dim", "horizon", "sv_mu", "sv_phi", "sv_q",
                "sv_beta", "init_mu", "init_phi", "init_q", "init_beta", "particles", "n_grid", "estimator",
                "iterations", "optimizer", "eta", "anneal_at", "anneal_factor", "eval_seeds",
            ],
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// The decaying adaptive rule ([`StepRule::Decaying`]).
    Decaying,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub id: ExperimentId,
    pub output: PathBuf,
    pub seed: u64,
    pub data_seed: u64,
    /// `0` means `N = 2T` (toy experiments only).
    pub particles: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub eta: f64,
    /// Iteration after which steps are multiplied by `anneal_factor`; 0 is off.
    pub anneal_at: usize,
    pub anneal_factor: f64,
    pub eval_every: usize,
    pub eval_seeds: usize,
    pub estimator: EstimatorTag,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub alpha: f64,
    pub q_var: f64,
    pub r_var: f64,
    pub c_kind: CKind,
    pub sv_mu: f64,
    pub sv_phi: f64,
    pub sv_q: f64,
    pub sv_beta: f64,
    pub init_mu: f64,
    pub init_phi: f64,
    pub init_q: f64,
    pub init_beta: f64,
    /// Observations to use instead of simulated data.
    pub data: Option<PathBuf>,
    pub y_value: f64,
    pub t_grid: Vec<usize>,
    pub n_grid: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub grad_seeds: usize,
    pub raw_gradients: bool,
    pub samples: usize,
    pub n_mc: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `id`.
    pub fn defaults(id: ExperimentId) -> Self {
        let mut c = Self {
            id,
            output: PathBuf::from("out").join(id.as_str()),
            seed: 1,
            data_seed: 1,
            particles: 4,
            horizon: 10,
            iterations: 3000,
            optimizer: OptimizerKind::Adam,
            eta: 0.01,
            anneal_at: 0,
            anneal_factor: 0.1,
            eval_every: 0,
            eval_seeds: 1000,
            estimator: EstimatorTag::RepOnly,
            state_dim: 10,
            obs_dim: 1,
            alpha: 0.42,
            q_var: 1.0,
            r_var: 1.0,
            c_kind: CKind::Sparse,
            sv_mu: 0.0,
            sv_phi: 0.95,
            sv_q: 0.01,
            sv_beta: 0.6,
            init_mu: 0.0,
            init_phi: 0.9,
            init_q: 0.05,
            init_beta: 1.0,
            data: None,
            y_value: 3.0,
            t_grid: vec![2, 5, 10, 20, 50],
            n_grid: vec![4, 8, 16],
            lambdas: vec![-1.0, 0.0, 1.0],
            grad_seeds: 10_000,
            raw_gradients: true,
            samples: 100_000,
            n_mc: 2000,
        };
        match id {
            ExperimentId::Fig1Toy | ExperimentId::ScalingN2t => {
                c.particles = 0;
                c.iterations = 6000;
                c.eta = 0.05;
                c.anneal_at = 3000;
                c.eval_seeds = 2000;
            }
            ExperimentId::GradBiasScalar => {
                c.horizon = 2;
                c.data_seed = 0;
                c.n_grid = vec![2, 4];
            }
            ExperimentId::GradBiasLgssm => {
                c.eval_every = 10;
                c.eval_seeds = 300;
            }
            ExperimentId::Table1Proposals => {
                c.horizon = 25;
                c.q_var = 0.01;
                c.c_kind = CKind::Dense;
                c.iterations = 20_000;
                c.eta = 0.002;
                c.anneal_at = 10_000;
                c.anneal_factor = 0.15;
                c.eval_seeds = 2000;
            }
            ExperimentId::VisBimodal => {
                c.y_value = 1.5;
                c.particles = 10;
                c.iterations = 2000;
            }
            ExperimentId::StochvolVem | ExperimentId::StochvolNsweep => {
                c.state_dim = 5;
                c.horizon = 119;
                c.data_seed = 11;
                c.iterations = 4000;
                c.eta = 0.003;
                c.eval_seeds = 500;
                if id == ExperimentId::StochvolNsweep {
                    c.particles = 16;
                    c.n_grid = vec![16, 32, 64, 128, 256];
                }
            }
        }
        c
    }

    /// Parses the config text; `experiment` must be present.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (row, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", row + 1)))?;
            pairs.push((row + 1, k.trim().to_owned(), v.trim().to_owned()));
        }
        let id = pairs
            .iter()
            .find(|(_, k, _)| k == "experiment")
            .ok_or_else(|| Error::Config("missing `experiment` key".into()))?
            .2
            .parse::<ExperimentId>()?;
        let mut cfg = Self::defaults(id);
        let mut seen = std::collections::HashSet::new();
        for (row, k, v) in &pairs {
            if !seen.insert(k.as_str()) {
                return Err(Error::Config(format!("line {row}: duplicate key `{k}`")));
            }
            if !id.keys().contains(&k.as_str()) {
                return Err(Error::Config(format!("line {row}: key `{k}` does not apply to {id}")));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {row}: {m}")),
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; `experiment` cannot change.
    pub fn with_overrides(mut self, overrides: &[(String, String)]) -> Result<Self> {
        for (k, v) in overrides {
            if k == "experiment" || !self.id.keys().contains(&k.as_str()) {
                return Err(Error::Config(format!("key `{k}` cannot be set for {}", self.id)));
            }
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every applicable key with its current value.
    pub fn to_text(&self) -> String {
        self.id.keys().iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Particle count for horizon `t` in the toy experiments.
    pub fn particles_for(&self, t: usize) -> usize {
        if self.particles == 0 {
            2 * t
        } else {
            self.particles
        }
    }

    pub fn step_rule(&self) -> StepRule {
        match self.optimizer {
            OptimizerKind::Adam => StepRule::adam(self.eta),
            OptimizerKind::Decaying => StepRule::Decaying { eta: self.eta },
        }
    }

    pub fn anneal(&self) -> Option<(usize, f64)> {
        (self.anneal_at > 0).then_some((self.anneal_at, self.anneal_factor))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.id)));
        let keys = self.id.keys();
        let uses = |k: &str| keys.contains(&k);
        if uses("particles") && self.particles == 0 && self.id != ExperimentId::Fig1Toy {
            return bad("particles must be at least 1");
        }
        if uses("horizon") && self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if uses("eta") && !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if uses("anneal_factor") && !(self.anneal_factor >= 0.0 && self.anneal_factor.is_finite()) {
            return bad("anneal_factor must be non-negative");
        }
        if uses("eval_seeds") && self.eval_seeds == 0 {
            return bad("eval_seeds must be at least 1");
        }
        if uses("t_grid") && (self.t_grid.is_empty() || self.t_grid.contains(&0)) {
            return bad("t_grid needs positive entries");
        }
        if uses("n_grid") && (self.n_grid.is_empty() || self.n_grid.contains(&0)) {
            return bad("n_grid needs positive entries");
        }
        if self.id == ExperimentId::GradBiasScalar && (self.n_grid.contains(&1) || self.lambdas.is_empty()) {
            return bad("score estimators need at least 2 particles and one lambda");
        }
        if uses("grad_seeds") && self.grad_seeds < 2 {
            return bad("grad_seeds must be at least 2");
        }
        if uses("state_dim") && self.state_dim == 0 || uses("obs_dim") && self.obs_dim == 0 {
            return bad("dimensions must be positive");
        }
        if uses("samples") && (self.samples == 0 || self.n_mc == 0) {
            return bad("samples and n_mc must be positive");
        }
        if uses("estimator") && !matches!(self.estimator, EstimatorTag::RepOnly | EstimatorTag::RepPlusScoreRB) {
            return bad("training estimator must be rep_only or rep_plus_score_rb");
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        match key {
            "experiment" => {}
            "output" => self.output = PathBuf::from(v),
            "seed" => self.seed = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "particles" => self.particles = num(key, v)?,
            "horizon" => self.horizon = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "decaying" => OptimizerKind::Decaying,
                    _ => return Err(Error::Config(format!("unknown optimizer `{v}`"))),
                }
            }
            "eta" => self.eta = num(key, v)?,
            "anneal_at" => self.anneal_at = num(key, v)?,
            "anneal_factor" => self.anneal_factor = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "eval_seeds" => self.eval_seeds = num(key, v)?,
            "estimator" => self.estimator = v.parse()?,
            "state_dim" => self.state_dim = num(key, v)?,
            "obs_dim" => self.obs_dim = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "q_var" => self.q_var = num(key, v)?,
            "r_var" => self.r_var = num(key, v)?,
            "c_kind" => {
                self.c_kind = match v {
                    "sparse" => CKind::Sparse,
                    "dense" => CKind::Dense,
                    _ => return Err(Error::Config(format!("c_kind must be sparse or dense, got `{v}`"))),
                }
            }
            "sv_mu" => self.sv_mu = num(key, v)?,
            "sv_phi" => self.sv_phi = num(key, v)?,
            "sv_q" => self.sv_q = num(key, v)?,
            "sv_beta" => self.sv_beta = num(key, v)?,
            "init_mu" => self.init_mu = num(key, v)?,
            "init_phi" => self.init_phi = num(key, v)?,
            "init_q" => self.init_q = num(key, v)?,
            "init_beta" => self.init_beta = num(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "y_value" => self.y_value = num(key, v)?,
            "t_grid" => self.t_grid = list(key, v)?,
            "n_grid" => self.n_grid = list(key, v)?,
            "lambdas" => self.lambdas = list(key, v)?,
            "grad_seeds" => self.grad_seeds = num(key, v)?,
            "raw_gradients" => self.raw_gradients = num(key, v)?,
            "samples" => self.samples = num(key, v)?,
            "n_mc" => self.n_mc = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        fn join<T: fmt::Debug>(v: &[T]) -> String {
            v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
        }
        match key {
            "experiment" => self.id.to_string(),
            "output" => self.output.display().to_string(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "particles" => self.particles.to_string(),
            "horizon" => self.horizon.to_string(),
            "iterations" => self.iterations.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Decaying => "decaying".into(),
            },
            "eta" => format!("{:?}", self.eta),
            "anneal_at" => self.anneal_at.to_string(),
            "anneal_factor" => format!("{:?}", self.anneal_factor),
            "eval_every" => self.eval_every.to_string(),
            "eval_seeds" => self.eval_seeds.to_string(),
            "estimator" => self.estimator.as_str().into(),
            "state_dim" => self.state_dim.to_string(),
            "obs_dim" => self.obs_dim.to_string(),
            "alpha" => format!("{:?}", self.alpha),
            "q_var" => format!("{:?}", self.q_var),
            "r_var" => format!("{:?}", self.r_var),
            "c_kind" => match self.c_kind {
                CKind::Sparse => "sparse".into(),
                CKind::Dense => "dense".into(),
            },
            "sv_mu" => format!("{:?}", self.sv_mu),
            "sv_phi" => format!("{:?}", self.sv_phi),
            "sv_q" => format!("{:?}", self.sv_q),
            "sv_beta" => format!("{:?}", self.sv_beta),
            "init_mu" => format!("{:?}", self.init_mu),
            "init_phi" => format!("{:?}", self.init_phi),
            "init_q" => format!("{:?}", self.init_q),
            "init_beta" => format!("{:?}", self.init_beta),
            "data" => self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "y_value" => format!("{:?}", self.y_value),
            "t_grid" => join(&self.t_grid),
            "n_grid" => join(&self.n_grid),
            "lambdas" => join(&self.lambdas),
            "grad_seeds" => self.grad_seeds.to_string(),
            "raw_gradients" => self.raw_gradients.to_string(),
            "samples" => self.samples.to_string(),
            "n_mc" => self.n_mc.to_string(),
            _ => unreachable!("no key `{key}`"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_default_round_trips() {
        for id in ExperimentId::ALL {
            let c = ExperimentConfig::defaults(id);
            c.validate().unwrap();
            assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn overrides_and_comments() {
        let c = ExperimentConfig::parse("# toy\nexperiment = fig1_toy\nt_grid = 2, 3\n\neta = 0.1\n").unwrap();
        assert_eq!(c.t_grid, vec![2, 3]);
        assert_eq!(c.eta, 0.1);
        assert_eq!(c.particles_for(3), 6);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "eta = 0.1",
            "experiment = nope",
            "experiment = fig1_toy\nbogus = 1",
            "experiment = scaling_n2t\nparticles = 8",
            "experiment = vis_bimodal\nalpha = 0.3",
            "experiment = fig1_toy\neta = fast",
            "experiment = fig1_toy\neta = -1",
            "experiment = fig1_toy\neta = 0.1\neta = 0.2",
            "experiment = table1_proposals\nestimator = score_full",
            "experiment = grad_bias_scalar\nn_grid = 1,2",
            "experiment = fig1_toy\njust words",
        ] {
            let e = ExperimentConfig::parse(text).unwrap_err();
            assert!(e.is_config(), "{text}: {e}");
        }
    }

    #[test]
    fn cli_style_overrides() {
        let kv = |k: &str, v: &str| (k.to_owned(), v.to_owned());
        let c = ExperimentConfig::defaults(ExperimentId::VisBimodal).with_overrides(&[kv("particles", "3")]).unwrap();
        assert_eq!(c.particles, 3);
        let base = ExperimentConfig::defaults(ExperimentId::VisBimodal);
        assert!(base.clone().with_overrides(&[kv("experiment", "fig1_toy")]).is_err());
        assert!(base.clone().with_overrides(&[kv("alpha", "0.1")]).is_err());
        assert!(base.with_overrides(&[kv("eta", "-2")]).unwrap_err().is_config());
    }
}
