use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vsmc::error::{Error, Result};
use vsmc::experiments::{exact_log_marginal, gradcheck_suite, load_matrix_csv, run_experiment, ExperimentConfig};

/// Variational SMC experiments.
///
/// Exit status: 0 on success, 2 for configuration or input errors, 3 for
/// numerical failures (including a failed gradient check).
#[derive(Parser)]
#[command(name = "vsmc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a `key = value` config file.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set iterations=100`.
        #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
        set: Vec<(String, String)>,
    },
    /// Compare analytic gradients to central differences on random configs.
    Gradcheck {
        /// scalar_mean_shift, per_step_affine or prior_tilted
        family: String,
        /// scalar_lgssm, lgssm, stochvol, toy_quadratic or bimodal
        model: String,
        #[arg(long, default_value_t = 100)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Print the exact log marginal likelihood of a CSV dataset.
    Oracle {
        /// scalar_lgssm, lgssm, toy_quadratic or bimodal
        model: String,
        data: PathBuf,
        /// Model setting, e.g. `--set a=0.9`.
        #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
        set: Vec<(String, String)>,
    },
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_owned(), v.trim().to_owned()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, set } => {
            let cfg = ExperimentConfig::from_file(&config)?.with_overrides(&set)?;
            let out = run_experiment(&cfg)?;
            for r in &out.summary {
                let se = r.std_err.map(|s| format!(" +- {s:.4}")).unwrap_or_default();
                let setting = if r.setting.is_empty() { String::new() } else { format!(" [{}]", r.setting) };
                println!("{} N={} T={}{setting} {} = {:.4}{se}", r.method, r.particles, r.horizon, r.quantity, r.value);
            }
            println!("wrote {} files to {}", out.files.len(), out.dir.display());
            Ok(())
        }
        Command::Gradcheck { family, model, configs, seed, tol } => {
            let c = gradcheck_suite(&family, &model, configs, seed)?;
            let ok = c.pathwise < tol && c.score < tol;
            println!(
                "{family}/{model}: {configs} configs, max rel err pathwise {:.3e}, score {:.3e}: {}",
                c.pathwise,
                c.score,
                if ok { "PASS" } else { "FAIL" }
            );
            if ok {
                Ok(())
            } else {
                Err(Error::Numerical { t: 0, msg: format!("gradient check above tolerance {tol:e}") })
            }
        }
        Command::Oracle { model, data, set } => {
            let d = load_matrix_csv(&data)?;
            println!("{:?}", exact_log_marginal(&model, &d, &set)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
