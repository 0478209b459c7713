//! Batch command-line interface: `estimate`, `balance` and `simulate`.

mod commands;
mod input;

pub use commands::{cmd_balance, cmd_estimate, cmd_simulate};
pub use input::{read_dataset, read_weights, write_weights, Input};

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::balance::CbpsVariant;
use crate::data::{Method, ReplicatePolicy};
use crate::error::Error;
use crate::solver::SolverConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Input {
        path: String,
        line: Option<u64>,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Input {
            path: path.display().to_string(),
            line: None,
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        }
    }
}

/// Every setting a command can take. The config file and the flags share
/// these keys; a flag overrides the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Flat TOML file with any of the keys below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Long-format subject CSV (id, treat, outcome, rep, x_*, u_*).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cbps_variant: Option<CbpsVariant>,
    /// Error family for the correction: normal or uniform (estimate,
    /// balance); for simulate also none, modified_beta, scaled_t.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_family: Option<String>,
    /// Error covariance of the error-prone covariates: p1 diagonal entries
    /// or p1*p1 row-major entries.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma1: Option<Vec<f64>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate_from_replicates: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicate_policy: Option<ReplicatePolicy>,
    /// Bootstrap replicates (0 or absent: no bootstrap).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_start: Option<usize>,
    /// Result JSON (estimate, balance) or output directory (simulate).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Write the fitted control weights as `id,weight` CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_out: Option<PathBuf>,
    /// Audit these `id,weight` control weights instead of fitting.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub design: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Sample sizes to sweep (simulate).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_grid: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_variance: Option<f64>,
    /// Error variances to sweep (simulate).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_grid: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<Method>>,
    /// Worker threads for simulate (default 1; THREADS overrides the default).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    /// Load `config` (if given) and overlay the flags.
    pub fn resolve(flags: &RunConfig) -> Result<RunConfig, CliError> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                toml::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?
            }
            None => RunConfig::default(),
        };
        overlay!(
            cfg, flags, input, method, cbps_variant, error_family, sigma1,
            estimate_from_replicates, replicate_policy, bootstrap, seed, grad_tol,
            max_iter, multi_start, output, weights_out, weights, design, n, n_grid,
            error_variance, variance_grid, m, reps, methods, threads
        );
        cfg.config = flags.config.clone();
        Ok(cfg)
    }

    pub fn solver(&self) -> Result<SolverConfig, CliError> {
        let mut s = SolverConfig::default();
        if let Some(v) = self.grad_tol {
            s.grad_tol = v;
        }
        if let Some(v) = self.max_iter {
            s.max_iter = v;
        }
        if let Some(v) = self.multi_start {
            s.multi_start = v;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn policy(&self) -> ReplicatePolicy {
        self.replicate_policy.unwrap_or_default()
    }

    pub fn method(&self) -> Method {
        self.method.unwrap_or(Method::Eb)
    }
}

#[derive(Debug, Parser)]
#[command(name = "covbal", version, about = "Covariate balancing weights with measurement-error corrections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit weights, estimate the ATT and report balance.
    Estimate(RunConfig),
    /// Report covariate balance of fitted or supplied weights.
    Balance(RunConfig),
    /// Run Monte Carlo tables for the built-in designs.
    Simulate(RunConfig),
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Estimate(flags) => RunConfig::resolve(flags).and_then(|c| cmd_estimate(&c)),
        Command::Balance(flags) => RunConfig::resolve(flags).and_then(|c| cmd_balance(&c)),
        Command::Simulate(flags) => RunConfig::resolve(flags).and_then(|c| cmd_simulate(&c)),
    };
    match outcome {
        Ok(json) => {
            if !json.is_empty() {
                println!("{json}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
