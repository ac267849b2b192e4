//! Config-driven experiment runs.
//!
//! [`run_experiment`] writes into `config.output`:
//!
//! - `config.txt`: the full configuration, re-parseable;
//! - `summary.csv`: long-format results ([`SummaryRow`]) including oracle
//!   values where one exists;
//! - `trace.csv`: every training run ([`write_trace`] schema);
//! - `checkpoints/*.txt`: final parameters of each run;
//! - per-experiment extras (`gradients.csv`, `samples.csv`, `density.csv`,
//!   `data.csv`).

mod check;
mod config;
mod io;
mod runs;

use std::path::{Path, PathBuf};

pub use check::{exact_log_marginal, gradcheck_suite, gradcheck_supported, GRADCHECK_FAMILIES, GRADCHECK_MODELS};
pub use runs::tv_histogram;

pub use config::{ExperimentConfig, ExperimentId, OptimizerKind};
pub use io::{
    load_matrix_csv, read_summary, read_trace, write_matrix_csv, write_summary, write_trace, LabeledRow, SummaryRow,
    SUMMARY_HEADER, TRACE_HEADER,
};

use crate::error::{Error, Result};
use crate::optimize::{write_checkpoint, Checkpoint, FitResult, FitStatus};

/// Files written by a run and its summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub summary: Vec<SummaryRow>,
    pub trace: Vec<LabeledRow>,
}

impl ExperimentOutput {
    /// All rows for `method` and `quantity`.
    pub fn rows<'a>(&'a self, method: &'a str, quantity: &'a str) -> impl Iterator<Item = &'a SummaryRow> + 'a {
        self.summary.iter().filter(move |r| r.method == method && r.quantity == quantity)
    }

    /// The row for `method` at `(particles, horizon)`, ignoring `setting`.
    pub fn get(&self, method: &str, particles: usize, horizon: usize, quantity: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.quantity == quantity && r.particles == particles && r.horizon == horizon)
    }
}

pub(crate) struct Sink {
    dir: PathBuf,
    files: Vec<PathBuf>,
    summary: Vec<SummaryRow>,
    trace: Vec<LabeledRow>,
}

impl Sink {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), summary: Vec::new(), trace: Vec::new() })
    }

    pub(crate) fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    pub(crate) fn row(&mut self, row: SummaryRow) {
        self.summary.push(row);
    }

    /// Records a fit's trace and checkpoint; a diverged fit is an error.
    pub(crate) fn fit(&mut self, method: &str, particles: usize, horizon: usize, family: &str, fit: &FitResult) -> Result<()> {
        if let FitStatus::Diverged { iteration } = fit.status {
            return Err(Error::Numerical { t: 0, msg: format!("{method} (N={particles}) diverged at iteration {iteration}") });
        }
        self.trace.extend(fit.trace.iter().map(|row| LabeledRow {
            method: method.into(),
            particles,
            horizon,
            row: row.clone(),
        }));
        let path = self.path(&format!("checkpoints/{method}_n{particles}_t{horizon}.txt"));
        write_checkpoint(
            &path,
            &Checkpoint { family: family.into(), iteration: fit.trace.len(), lambda: fit.lambda.clone(), theta: fit.theta.clone() },
        )
    }

    fn finish(mut self) -> Result<ExperimentOutput> {
        let t = self.path("trace.csv");
        write_trace(&self.trace, &t)?;
        let s = self.path("summary.csv");
        write_summary(&self.summary, &s)?;
        Ok(ExperimentOutput { dir: self.dir, files: self.files, summary: self.summary, trace: self.trace })
    }
}

/// Runs one experiment end to end. Errors carry the experiment id.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let id = config.id;
    let go = || -> Result<ExperimentOutput> {
        config.validate()?;
        let mut sink = Sink::new(&config.output)?;
        let cfg_path = sink.path("config.txt");
        std::fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        match id {
            ExperimentId::Fig1Toy | ExperimentId::ScalingN2t => runs::toy(config, &mut sink)?,
            ExperimentId::GradBiasScalar => runs::grad_bias_scalar(config, &mut sink)?,
            ExperimentId::GradBiasLgssm => runs::grad_bias_lgssm(config, &mut sink)?,
            ExperimentId::Table1Proposals => runs::table1(config, &mut sink)?,
            ExperimentId::VisBimodal => runs::vis_bimodal(config, &mut sink)?,
            ExperimentId::StochvolVem => runs::stochvol_vem(config, &mut sink)?,
            ExperimentId::StochvolNsweep => runs::stochvol_nsweep(config, &mut sink)?,
        }
        sink.finish()
    };
    go().map_err(|e| e.context(id.as_str()))
}

/// Iteration at which a smoothed trace first comes within `tol` of its
/// plateau, the mean of its last `tail` evaluations. `None` without
/// evaluations.
pub fn plateau_and_reach(trace: &[crate::optimize::TraceRow], tail: usize, tol: f64) -> Option<(f64, usize)> {
    let evals: Vec<(usize, f64)> = trace.iter().filter_map(|r| r.smoothed_elbo.map(|e| (r.iteration, e))).collect();
    if evals.is_empty() {
        return None;
    }
    let k = tail.clamp(1, evals.len());
    let plateau = evals[evals.len() - k..].iter().map(|e| e.1).sum::<f64>() / k as f64;
    let reach = evals.iter().find(|e| e.1 >= plateau - tol)?.0;
    Some((plateau, reach))
}
