use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate, ScenarioSpec, TAU0};
use crate::balance::{att, solve_cbps, solve_eb, CbpsVariant};
use crate::correction::{self, CorrectionSpec};
use crate::data::{treated_moments_of, BalanceFit, Dataset, Method, ReplicatePolicy};
use crate::diagnostics::{asymptotic_imbalance, imbalance};
use crate::error::{Error, Result};

/// Fit `method` on `data`. EB and CBPS use `spec`'s solver and replicate
/// policy; CBPS uses the over-identified moment stack.
pub fn fit(data: &Dataset, method: Method, spec: &CorrectionSpec) -> Result<BalanceFit> {
    match method {
        Method::Eb => solve_eb(data, &spec.solver, spec.replicate_policy),
        Method::Cbps => solve_cbps(
            data,
            &spec.solver,
            spec.replicate_policy,
            CbpsVariant::OverIdentified,
        ),
        _ => {
            let mut s = spec.clone();
            s.method = method;
            correction::solve(data, &s)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub scenario: String,
    pub design: String,
    pub covariate_law: String,
    pub error_family: String,
    pub error_variance: f64,
    pub m: usize,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub replicate_policy: ReplicatePolicy,
    pub tau0: f64,
    pub theta0: Vec<f64>,
    pub sd_convention: String,
    pub mse_convention: String,
}

/// Aggregates for one method over the successful reps of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub successes: usize,
    pub failures: usize,
    pub mean_tau: f64,
    pub bias: f64,
    pub sd: f64,
    pub mse: f64,
    pub mean_abs_bias: f64,
    pub mean_theta: Vec<f64>,
    /// Mean ASMD of the fitted weights on the true covariates.
    pub mean_asmd: Vec<f64>,
    pub mean_md: Option<f64>,
    /// Mean large-sample ASMD limit, for naive methods when the error MGF
    /// is available.
    pub asmd_limit: Option<Vec<f64>>,
    pub md_limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloTable {
    pub metadata: TableMetadata,
    pub cells: Vec<CellSummary>,
}

impl MonteCarloTable {
    pub fn cell(&self, method: Method) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.method == method)
    }
}

#[derive(Debug, Clone)]
struct RepRecord {
    tau: f64,
    theta: Vec<f64>,
    asmd: Vec<Option<f64>>,
    md: Option<f64>,
    limit: Option<(Vec<f64>, f64)>,
}

fn run_rep(spec: &ScenarioSpec, rep: usize) -> Vec<Result<RepRecord>> {
    let (truth, observed) = match generate(spec, rep) {
        Ok(d) => d,
        Err(e) => return spec.methods.iter().map(|_| Err(e.clone())).collect(),
    };
    spec.methods
        .iter()
        .map(|&method| fit_rep(spec, method, &truth, &observed))
        .collect()
}

fn fit_rep(spec: &ScenarioSpec, method: Method, truth: &Dataset, observed: &Dataset) -> Result<RepRecord> {
    let cspec = spec.correction_spec(method)?;
    let fit = fit(observed, method, &cspec)?;
    let tau = att(&fit.weights, observed)?;
    let z_true = truth.covariates(ReplicatePolicy::First)?;
    let report = imbalance(&fit.weights, &z_true, observed)?;
    let limit = match (method, spec.true_model()) {
        (Method::Eb | Method::Cbps, Some(model)) => {
            let theta = fit.theta_vector();
            let p = truth.p();
            let theta = theta.rows(theta.len() - p, p).into_owned();
            let moments = treated_moments_of(&z_true, truth.treated_indices())?;
            let (a, m) = asymptotic_imbalance(&theta, &model, &moments.sd, &moments.cov)?;
            Some((a.iter().copied().collect(), m))
        }
        _ => None,
    };
    Ok(RepRecord {
        tau,
        theta: fit.theta,
        asmd: report.asmd,
        md: report.md,
        limit,
    })
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    (c > 0).then(|| s / c as f64)
}

fn summarize(method: Method, records: &[&RepRecord], failures: usize) -> CellSummary {
    let k = records.len();
    let mean_tau = mean_of(records.iter().map(|r| r.tau)).unwrap_or(f64::NAN);
    let bias = mean_tau - TAU0;
    let sd = if k > 1 {
        (records.iter().map(|r| (r.tau - mean_tau).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mse = bias * bias + sd * sd * (k.saturating_sub(1)) as f64 / k as f64;
    let dim = records.first().map_or(0, |r| r.theta.len());
    let mean_theta = (0..dim)
        .map(|j| mean_of(records.iter().map(|r| r.theta[j])).unwrap_or(f64::NAN))
        .collect();
    let p = records.first().map_or(0, |r| r.asmd.len());
    let mean_asmd = (0..p)
        .map(|j| mean_of(records.iter().filter_map(|r| r.asmd[j])).unwrap_or(f64::NAN))
        .collect();
    let mean_md = mean_of(records.iter().filter_map(|r| r.md));
    let with_limit: Vec<&(Vec<f64>, f64)> = records.iter().filter_map(|r| r.limit.as_ref()).collect();
    let (asmd_limit, md_limit) = if with_limit.is_empty() {
        (None, None)
    } else {
        (
            Some(
                (0..p)
                    .map(|j| mean_of(with_limit.iter().map(|l| l.0[j])).unwrap_or(f64::NAN))
                    .collect(),
            ),
            mean_of(with_limit.iter().map(|l| l.1)),
        )
    };
    CellSummary {
        method,
        successes: k,
        failures,
        mean_tau,
        bias,
        sd,
        mse,
        mean_abs_bias: mean_of(records.iter().map(|r| (r.tau - TAU0).abs())).unwrap_or(f64::NAN),
        mean_theta,
        mean_asmd,
        mean_md,
        asmd_limit,
        md_limit,
    }
}

/// Run every rep of `spec` on the current rayon pool and aggregate per
/// method. Results are reduced in rep order, so the table does not depend
/// on the number of threads.
pub fn run_table(spec: &ScenarioSpec) -> Result<MonteCarloTable> {
    spec.validate()?;
    let per_rep: Vec<Vec<Result<RepRecord>>> =
        (0..spec.reps).into_par_iter().map(|rep| run_rep(spec, rep)).collect();
    let mut cells = Vec::with_capacity(spec.methods.len());
    for (k, &method) in spec.methods.iter().enumerate() {
        let mut ok = Vec::new();
        let mut failures = 0;
        for rep in &per_rep {
            match &rep[k] {
                Ok(r) => ok.push(r),
                Err(e) => {
                    log::debug!("{method} failed: {e}");
                    failures += 1;
                }
            }
        }
        if ok.is_empty() {
            return Err(Error::AllRepsFailed {
                method: method.to_string(),
                reps: spec.reps,
            });
        }
        cells.push(summarize(method, &ok, failures));
    }
    Ok(MonteCarloTable {
        metadata: TableMetadata {
            scenario: spec.label(),
            design: spec.design.label().into(),
            covariate_law: spec.design.covariate_law().into(),
            error_family: spec.error_family.label().into(),
            error_variance: spec.variance(),
            m: spec.m,
            n: spec.n,
            reps: spec.reps,
            seed: spec.seed,
            replicate_policy: spec.replicate_policy,
            tau0: TAU0,
            theta0: spec.design.theta0(),
            sd_convention: "sample standard deviation, divisor successes - 1".into(),
            mse_convention: "bias^2 + sd^2 * (successes - 1) / successes".into(),
        },
        cells,
    })
}

/// [`run_table`] on a dedicated pool of `threads` workers.
pub fn run_table_with_threads(spec: &ScenarioSpec, threads: usize) -> Result<MonteCarloTable> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))?;
    pool.install(|| run_table(spec))
}
