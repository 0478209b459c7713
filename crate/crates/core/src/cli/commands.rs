use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::input::{read_dataset, read_weights, write_weights, Input};
use super::{CliError, RunConfig};
use crate::balance::{solve_cbps, CbpsVariant};
use crate::correction::CorrectionSpec;
use crate::data::{BalanceFit, Method};
use crate::diagnostics::{imbalance, Basis, ImbalanceReport};
use crate::error_model::{estimate_sigma, ErrorModel};
use crate::experiments::{
    att_result, bootstrap, fit, plot_rows, run_table_with_threads, write_plot_csv, write_table_csv, Design,
    ErrorKind, MonteCarloTable, PlotAxis, ScenarioSpec,
};
use crate::linalg::Matrix;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize)]
struct FitSummary<'a> {
    method: Method,
    theta: &'a [f64],
    converged: bool,
    grad_norm: f64,
    iterations: usize,
    warnings: &'a [String],
}

impl<'a> From<&'a BalanceFit> for FitSummary<'a> {
    fn from(f: &'a BalanceFit) -> Self {
        Self {
            method: f.method,
            theta: &f.theta,
            converged: f.converged,
            grad_norm: f.grad_norm,
            iterations: f.iterations,
            warnings: &f.warnings,
        }
    }
}

fn input_path(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.input
        .as_deref()
        .ok_or_else(|| CliError::Config("no input file given (set input)".into()))
}

fn error_model(cfg: &RunConfig, input: &Input) -> Result<Option<ErrorModel>, CliError> {
    let method = cfg.method();
    let from_reps = cfg.estimate_from_replicates.unwrap_or(false);
    if cfg.sigma1.is_some() && from_reps {
        return Err(CliError::Config(
            "sigma1 and estimate_from_replicates are mutually exclusive".into(),
        ));
    }
    if method.uses_replicates() {
        if cfg.sigma1.is_some() {
            return Err(CliError::Config(format!(
                "method {method} does not use sigma1; remove it"
            )));
        }
        return Ok(None);
    }
    let p1 = input.data.p1();
    let sigma = match (&cfg.sigma1, from_reps) {
        (Some(entries), _) => Some(if entries.len() == p1 {
            Matrix::from_diagonal(&crate::linalg::Vector::from_column_slice(entries))
        } else if entries.len() == p1 * p1 {
            Matrix::from_row_slice(p1, p1, entries)
        } else {
            return Err(CliError::Config(format!(
                "sigma1 has {} entries; expected {p1} (diagonal) or {} (full)",
                entries.len(),
                p1 * p1
            )));
        }),
        (None, true) => Some(estimate_sigma(&input.data)?.view((0, 0), (p1, p1)).into_owned()),
        (None, false) => None,
    };
    let Some(sigma) = sigma else {
        if method.needs_error_model() {
            return Err(CliError::Config(format!(
                "method {method} needs an error model: set sigma1 or estimate_from_replicates"
            )));
        }
        return Ok(None);
    };
    let model = match cfg.error_family.as_deref().unwrap_or("normal") {
        "normal" => ErrorModel::normal(sigma)?,
        "uniform" => ErrorModel::uniform(sigma)?,
        other => {
            return Err(CliError::Config(format!(
                "error_family {other:?} has no moment generating function here; use normal or uniform"
            )))
        }
    };
    Ok(Some(model))
}

fn correction_spec(cfg: &RunConfig, input: &Input) -> Result<CorrectionSpec, CliError> {
    Ok(CorrectionSpec::new(cfg.method(), error_model(cfg, input)?)
        .with_solver(cfg.solver()?)
        .with_policy(cfg.policy()))
}

fn fit_weights(cfg: &RunConfig, input: &Input, spec: &CorrectionSpec) -> Result<BalanceFit, CliError> {
    let method = cfg.method();
    let fitted = match (method, cfg.cbps_variant) {
        (Method::Cbps, Some(variant)) => solve_cbps(&input.data, &spec.solver, spec.replicate_policy, variant)?,
        _ => fit(&input.data, method, spec)?,
    };
    Ok(fitted)
}

fn observed_imbalance(
    cfg: &RunConfig,
    input: &Input,
    weights: &crate::data::WeightVector,
) -> Result<ImbalanceReport, CliError> {
    let z = input.data.covariates(cfg.policy())?;
    Ok(imbalance(weights, &z, &input.data)?)
}

/// The resolved configuration echoed into results, defaults filled in.
/// The thread count is left out since it never changes results.
fn echo(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        method: cfg.methods.is_none().then(|| cfg.method()),
        replicate_policy: Some(cfg.policy()),
        seed: Some(cfg.seed.unwrap_or(1)),
        threads: None,
        ..cfg.clone()
    }
}

fn emit(cfg: &RunConfig, doc: &serde_json::Value) -> Result<String, CliError> {
    let text = serde_json::to_string_pretty(doc).map_err(|e| CliError::Config(e.to_string()))?;
    match &cfg.output {
        Some(path) => {
            std::fs::write(path, format!("{text}\n")).map_err(|e| CliError::io(path, e))?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

/// Fit weights, estimate the ATT (with optional bootstrap) and report
/// balance on the observed covariates. Returns the JSON written to stdout
/// (empty when `output` is set).
pub fn cmd_estimate(cfg: &RunConfig) -> Result<String, CliError> {
    let input = read_dataset(input_path(cfg)?)?;
    if !input.data.has_outcome() {
        return Err(crate::Error::MissingOutcome.into());
    }
    let spec = correction_spec(cfg, &input)?;
    let method = cfg.method();
    let b = cfg.bootstrap.unwrap_or(0);
    if b > 0 && method == Method::Cbps && cfg.cbps_variant == Some(CbpsVariant::JustIdentified) {
        return Err(CliError::Config(
            "bootstrap supports the default CBPS variant only".into(),
        ));
    }
    let fitted = fit_weights(cfg, &input, &spec)?;
    let att = if b > 0 {
        bootstrap(&input.data, method, &spec, b, cfg.seed.unwrap_or(1))?
    } else {
        att_result(&fitted, &input.data)?
    };
    let report = observed_imbalance(cfg, &input, &fitted.weights)?.with_labels(Basis::ObservedCovariates, method);
    if let Some(path) = &cfg.weights_out {
        write_weights(path, &fitted.weights, &input.data)?;
    }
    let doc = json!({
        "command": "estimate",
        "version": VERSION,
        "config": echo(cfg),
        "n": input.data.n(),
        "n_treated": input.data.n_treated(),
        "n_control": input.data.n_control(),
        "covariates": input.covariate_names(),
        "fit": FitSummary::from(&fitted),
        "att": att,
        "imbalance": report,
    });
    emit(cfg, &doc)
}

/// Balance report for supplied weights (`weights`) or for weights fitted by
/// `method`. No outcome needed.
pub fn cmd_balance(cfg: &RunConfig) -> Result<String, CliError> {
    let input = read_dataset(input_path(cfg)?)?;
    let (weights, fitted) = match &cfg.weights {
        Some(path) => (read_weights(path, &input.data)?, None),
        None => {
            let spec = correction_spec(cfg, &input)?;
            let f = fit_weights(cfg, &input, &spec)?;
            (f.weights.clone(), Some(f))
        }
    };
    let mut report = observed_imbalance(cfg, &input, &weights)?;
    if let Some(f) = &fitted {
        report = report.with_labels(Basis::ObservedCovariates, f.method);
    }
    if let (Some(path), Some(_)) = (&cfg.weights_out, &fitted) {
        write_weights(path, &weights, &input.data)?;
    }
    let doc = json!({
        "command": "balance",
        "version": VERSION,
        "config": echo(cfg),
        "n": input.data.n(),
        "n_treated": input.data.n_treated(),
        "n_control": input.data.n_control(),
        "covariates": input.covariate_names(),
        "fit": fitted.as_ref().map(FitSummary::from),
        "imbalance": report,
    });
    emit(cfg, &doc)
}

fn threads(cfg: &RunConfig) -> Result<usize, CliError> {
    if let Some(t) = cfg.threads {
        return Ok(t.max(1));
    }
    match std::env::var("THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|t| t.max(1))
            .map_err(|_| CliError::Config(format!("THREADS={v:?} is not a thread count"))),
        Err(_) => Ok(1),
    }
}

/// Scenario grid from the configuration: every combination of the sample
/// size and error variance grids.
pub fn scenarios(cfg: &RunConfig) -> Result<Vec<ScenarioSpec>, CliError> {
    let design: Design = cfg.design.as_deref().unwrap_or("bivariate").parse()?;
    let family: ErrorKind = cfg.error_family.as_deref().unwrap_or("normal").parse()?;
    let ns = cfg.n_grid.clone().unwrap_or_else(|| vec![cfg.n.unwrap_or(2000)]);
    let vars = cfg
        .variance_grid
        .clone()
        .unwrap_or_else(|| vec![cfg.error_variance.unwrap_or(0.0)]);
    let methods = cfg.methods.clone().unwrap_or_else(|| vec![cfg.method()]);
    let solver = cfg.solver()?;
    let mut out = Vec::new();
    for &n in &ns {
        for &v in &vars {
            let mut spec = ScenarioSpec::new(design, n, family, v);
            spec.m = cfg.m.unwrap_or(1);
            spec.reps = cfg.reps.unwrap_or(spec.reps);
            spec.seed = cfg.seed.unwrap_or(spec.seed);
            spec.methods = methods.clone();
            spec.replicate_policy = cfg.policy();
            spec.solver = solver.clone();
            spec.validate()?;
            out.push(spec);
        }
    }
    Ok(out)
}

/// Run the scenario grid and write `table.csv`, `table.json` and
/// `plot.csv` into the `output` directory (default: current directory).
/// Nothing is printed.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<String, CliError> {
    if cfg.method.is_some() && cfg.methods.is_some() {
        return Err(CliError::Config("set method or methods, not both".into()));
    }
    let specs = scenarios(cfg)?;
    let workers = threads(cfg)?;
    let tables = specs
        .iter()
        .map(|s| run_table_with_threads(s, workers))
        .collect::<Result<Vec<MonteCarloTable>, _>>()?;
    let dir = cfg.output.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let axis = if cfg.variance_grid.as_ref().map_or(0, Vec::len) <= 1
        && cfg.n_grid.as_ref().map_or(0, Vec::len) > 1
    {
        PlotAxis::SampleSize
    } else {
        PlotAxis::ErrorVariance
    };
    write_table_csv(&tables, &dir.join("table.csv"))?;
    write_plot_csv(&plot_rows(&tables, axis), &dir.join("plot.csv"))?;
    let doc = json!({
        "command": "simulate",
        "version": VERSION,
        "config": echo(cfg),
        "tables": tables,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Config(e.to_string()))?;
    let path = dir.join("table.json");
    std::fs::write(&path, format!("{text}\n")).map_err(|e| CliError::io(&path, e))?;
    log::info!("wrote {} tables to {}", tables.len(), dir.display());
    Ok(String::new())
}
