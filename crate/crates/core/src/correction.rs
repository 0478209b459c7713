//! Measurement-error-corrected estimators: CEB, BCEB, the replicate-based
//! CEB-HL and CEB-HW, and corrected CBPS.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::balance::{
    check_dim, design_matrix, fit_gmm, not_converged, softmax_weights, solve_eb, EbDual,
};
use crate::data::{BalanceFit, Dataset, Method, ReplicatePolicy, WeightVector};
use crate::error::{Error, Result};
use crate::error_model::{eta0_hat, ErrorModel, MAX_EXPONENT};
use crate::linalg::{descent_direction, solve_checked, Matrix, Vector};
use crate::solver::{find_root, minimize, MomentEval, SolverConfig};

/// Smallest singular value accepted by the BCEB matrix correction.
pub const CORRECTION_SV_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionSpec {
    pub method: Method,
    #[serde(skip)]
    pub error_model: Option<ErrorModel>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub replicate_policy: ReplicatePolicy,
}

impl CorrectionSpec {
    pub fn new(method: Method, error_model: Option<ErrorModel>) -> Self {
        Self {
            method,
            error_model,
            solver: SolverConfig::default(),
            replicate_policy: ReplicatePolicy::First,
        }
    }

    pub fn with_solver(mut self, solver: SolverConfig) -> Self {
        self.solver = solver;
        self
    }

    pub fn with_policy(mut self, policy: ReplicatePolicy) -> Self {
        self.replicate_policy = policy;
        self
    }

    fn model_for(&self, data: &Dataset) -> Result<&ErrorModel> {
        let model = self.error_model.as_ref().ok_or_else(|| {
            Error::InvalidErrorModel(format!("method {} needs an error model", self.method))
        })?;
        if model.p1() != data.p1() {
            return Err(Error::DimensionMismatch(format!(
                "error model covers {} covariates, data has {} error-prone covariates",
                model.p1(),
                data.p1()
            )));
        }
        Ok(model)
    }
}

/// Run the corrected estimator named by `spec.method`.
pub fn solve(data: &Dataset, spec: &CorrectionSpec) -> Result<BalanceFit> {
    match spec.method {
        Method::Ceb => solve_ceb(data, spec),
        Method::Bceb => solve_bceb(data, spec),
        Method::CebHl | Method::CebHw => solve_replicated(data, spec),
        Method::CorrectedCbps => solve_corrected_cbps(data, spec),
        Method::Eb | Method::Cbps => Err(Error::Unsupported(format!(
            "{} is not a corrected method",
            spec.method
        ))),
    }
}

/// `L(theta; O1*) - log M(theta)` with derivatives.
pub fn ceb_objective(
    theta: &Vector,
    dual: &EbDual,
    model: &ErrorModel,
) -> Result<(f64, Vector, Matrix)> {
    let (v, g, h) = dual.eval(theta);
    let m = model.log_mgf(theta)?;
    Ok((v - m.value, g - m.grad, h - m.hess))
}

fn bceb_theta(dual: &EbDual, naive: &Vector, model: &ErrorModel) -> Result<Vector> {
    let (_, _, h) = dual.eval(naive);
    let sigma = model.full_sigma(dual.dim());
    solve_checked(&(&h - sigma), &(&h * naive), CORRECTION_SV_TOL).map_err(|sv| {
        Error::SingularCorrection {
            smallest_singular_value: sv,
        }
    })
}

/// Corrected entropy balancing: multi-start damped Newton on the corrected
/// loss, keeping the local minimum with the smallest objective.
pub fn solve_ceb(data: &Dataset, spec: &CorrectionSpec) -> Result<BalanceFit> {
    let cfg = &spec.solver;
    cfg.validate()?;
    let model = spec.model_for(data)?;
    let dual = EbDual::new(data, spec.replicate_policy)?;
    let p = dual.dim();

    let mut starts = vec![Vector::zeros(p)];
    let naive = minimize(|t| Ok(dual.eval(t)), Vector::zeros(p), cfg)
        .ok()
        .filter(|o| o.converged)
        .map(|o| o.x);
    if let Some(t) = &naive {
        starts.push(t.clone());
        if let Ok(b) = bceb_theta(&dual, t, &model.as_normal()) {
            starts.push(b);
        }
    }
    let centre = naive.clone().unwrap_or_else(|| Vector::zeros(p));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.multi_start {
        let jitter = Vector::from_fn(p, |j, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * cfg.restart_scale * centre[j].abs().max(1.0)
        });
        starts.push(&centre + jitter);
    }

    let objective = |t: &Vector| ceb_objective(t, &dual, model);
    let mut best: Option<crate::solver::MinimizeOutcome> = None;
    let mut last_err = None;
    let mut iterations = 0;
    for x0 in starts {
        match minimize(objective, x0, cfg) {
            Ok(out) => {
                iterations += out.iterations;
                let local_min = descent_direction(&out.hess, &out.grad, 0.0).is_some()
                    && out.hess.clone().cholesky().is_some();
                if out.converged && local_min {
                    if best.as_ref().map_or(true, |b| out.value < b.value) {
                        best = Some(out);
                    }
                } else if last_err.is_none() || out.converged {
                    last_err = Some(not_converged(&out));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let out = best.ok_or_else(|| {
        last_err.unwrap_or(Error::NotConverged {
            iterations,
            grad_norm: f64::NAN,
            reason: "no start converged".into(),
        })
    })?;
    let weights = softmax_weights(data, &(dual.control() * &out.x))?;
    Ok(BalanceFit {
        theta: out.x.iter().copied().collect(),
        weights,
        converged: true,
        grad_norm: out.grad_norm,
        iterations,
        method: Method::Ceb,
        warnings: Vec::new(),
    })
}

/// Bias-corrected EB: one matrix correction of the naive fit,
/// `(H - Sigma)^-1 H theta*` with `H` the naive dual Hessian. The normal
/// approximation to the error covariance is used whatever the family.
pub fn solve_bceb(data: &Dataset, spec: &CorrectionSpec) -> Result<BalanceFit> {
    let model = spec.model_for(data)?.as_normal();
    let naive = solve_eb(data, &spec.solver, spec.replicate_policy)?;
    let dual = EbDual::new(data, spec.replicate_policy)?;
    let theta = bceb_theta(&dual, &naive.theta_vector(), &model)?;
    let weights = softmax_weights(data, &(dual.control() * &theta))?;
    Ok(BalanceFit {
        theta: theta.iter().copied().collect(),
        weights,
        converged: true,
        grad_norm: naive.grad_norm,
        iterations: naive.iterations,
        method: Method::Bceb,
        warnings: naive.warnings,
    })
}

/// Per-replicate scores `theta' Z*_ij` for each subject in `rows`, shifted
/// by their common maximum. Returns the shifted scores and the shift.
fn replicate_scores(theta: &Vector, data: &Dataset, rows: &[usize]) -> (Vec<Vec<f64>>, f64) {
    let p1 = data.p1();
    let mut max = f64::NEG_INFINITY;
    let scores: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| {
            let s = data.subject(i);
            let base: f64 = s.u.iter().zip(theta.iter().skip(p1)).map(|(a, b)| a * b).sum();
            s.x_star
                .iter()
                .map(|x| {
                    let v = base + x.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(v);
                    v
                })
                .collect()
        })
        .collect();
    let shifted = scores
        .into_iter()
        .map(|v| v.into_iter().map(|s| s - max).collect())
        .collect();
    (shifted, max)
}

fn add_scaled(acc: &mut [f64], v: &[f64], w: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += w * b;
    }
}

/// Symmetric-error replicate estimating function
/// `sum_{T=0} R1_i / sum_{T=0} R0_i - (m-weighted treated replicate mean)`.
/// `R1_i` averages `exp(theta'Z*_ij)(Z*_ij - eta1/eta0)` over replicates.
pub fn b_hl(theta: &Vector, data: &Dataset) -> Result<Vector> {
    let p = data.p();
    check_dim(theta, p)?;
    let eta = eta0_hat(theta, data)?;
    let ratio = &eta.eta1 / eta.eta0;
    let ctrl = data.control_indices();
    let (scores, _) = replicate_scores(theta, data, ctrl);
    let mut num = vec![0.0; p];
    let mut den = 0.0;
    for (r, &i) in ctrl.iter().enumerate() {
        let subj = data.subject(i);
        let m = scores[r].len() as f64;
        let mut e_sum = 0.0;
        for (x, s) in subj.x_star.iter().zip(&scores[r]) {
            let e = s.exp() / m;
            e_sum += e;
            add_scaled(&mut num, x, e);
        }
        den += e_sum;
        add_scaled(&mut num[data.p1()..], &subj.u, e_sum);
    }
    let num = Vector::from_vec(num) - &ratio * den;
    let mut trt = vec![0.0; p];
    let mut total_m = 0usize;
    for &i in data.treated_indices() {
        let subj = data.subject(i);
        let m = subj.replicates();
        total_m += m;
        for x in &subj.x_star {
            add_scaled(&mut trt, x, 1.0);
        }
        add_scaled(&mut trt[data.p1()..], &subj.u, m as f64);
    }
    let trt = Vector::from_vec(trt);
    Ok(num / den - trt / total_m as f64)
}

/// Distribution-free replicate estimating function built from
/// cross-replicate products; only controls with `m_i >= 2` contribute.
pub fn b_hw(theta: &Vector, data: &Dataset) -> Result<Vector> {
    let p = data.p();
    check_dim(theta, p)?;
    let ctrl: Vec<usize> = data
        .control_indices()
        .iter()
        .copied()
        .filter(|&i| data.subject(i).replicates() >= 2)
        .collect();
    if ctrl.is_empty() {
        return Err(Error::NoReplicates);
    }
    let (scores, _) = replicate_scores(theta, data, &ctrl);
    let p1 = data.p1();
    let mut num = vec![0.0; p];
    let mut den = 0.0;
    let mut total = vec![0.0; p1];
    for (r, &i) in ctrl.iter().enumerate() {
        let subj = data.subject(i);
        let m = scores[r].len();
        total.iter_mut().for_each(|v| *v = 0.0);
        for x in &subj.x_star {
            add_scaled(&mut total, x, 1.0);
        }
        let pair = 1.0 / (m * (m - 1)) as f64;
        let mut e_sum = 0.0;
        for (x, s) in subj.x_star.iter().zip(&scores[r]) {
            let e = s.exp();
            e_sum += e;
            let w = e * pair;
            for c in 0..p1 {
                num[c] += w * (total[c] - x[c]);
            }
        }
        den += e_sum / m as f64;
        // sum over k != j of U is (m - 1) U, times the pair weight
        add_scaled(&mut num[p1..], &subj.u, e_sum / m as f64);
    }
    let num = Vector::from_vec(num);
    let mut trt = Vector::zeros(p);
    for &i in data.treated_indices() {
        let s = data.subject(i);
        let mut row = s.replicate_mean();
        row.extend_from_slice(&s.u);
        trt += Vector::from_vec(row);
    }
    let trt = trt / data.n_treated() as f64;
    if !den.is_finite() || den <= 0.0 {
        return Err(Error::NonFiniteExp {
            exponent: f64::INFINITY,
            subject: None,
        });
    }
    Ok(num / den - trt)
}

/// Replicate-averaged softmax weights over all controls.
pub fn replicate_weights(theta: &Vector, data: &Dataset) -> Result<WeightVector> {
    let ctrl = data.control_indices();
    let (scores, _) = replicate_scores(theta, data, ctrl);
    let raw = scores
        .iter()
        .map(|s| s.iter().map(|v| v.exp()).sum::<f64>() / s.len() as f64)
        .collect();
    WeightVector::from_unnormalized(ctrl.to_vec(), raw)
}

/// CEB-HL or CEB-HW: damped Newton root finding on the replicate
/// estimating function. Starts at the naive fit on replicate means, then
/// zero, then random perturbations; the first converged root is returned.
pub fn solve_replicated(data: &Dataset, spec: &CorrectionSpec) -> Result<BalanceFit> {
    let cfg = &spec.solver;
    cfg.validate()?;
    let hl = match spec.method {
        Method::CebHl => true,
        Method::CebHw => false,
        other => {
            return Err(Error::Unsupported(format!(
                "{other} is not a replicate-based method"
            )))
        }
    };
    if data.subjects().iter().all(|s| s.replicates() < 2) {
        return Err(Error::NoReplicates);
    }
    let p = data.p();
    let residual = |t: &Vector| if hl { b_hl(t, data) } else { b_hw(t, data) };
    let mut starts = Vec::new();
    if let Ok(fit) = solve_eb(data, cfg, ReplicatePolicy::Mean) {
        starts.push(fit.theta_vector());
    }
    starts.push(Vector::zeros(p));
    let centre = starts[0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.multi_start {
        let jitter = Vector::from_fn(p, |j, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * cfg.restart_scale * centre[j].abs().max(1.0)
        });
        starts.push(&centre + jitter);
    }
    let mut best: Option<(f64, usize, Option<String>)> = None;
    let mut iterations = 0;
    for x0 in starts {
        let out = match find_root(residual, x0, cfg) {
            Ok(out) => out,
            Err(_) => continue,
        };
        iterations += out.iterations;
        if out.converged {
            let weights = replicate_weights(&out.x, data)?;
            return Ok(BalanceFit {
                theta: out.x.iter().copied().collect(),
                weights,
                converged: true,
                grad_norm: out.residual_norm,
                iterations,
                method: spec.method,
                warnings: Vec::new(),
            });
        }
        if best.as_ref().map_or(true, |b| out.residual_norm < b.0) {
            best = Some((out.residual_norm, out.iterations, out.failure));
        }
    }
    let (grad_norm, _, reason) = best.unwrap_or((f64::NAN, 0, None));
    Err(Error::NotConverged {
        iterations,
        grad_norm,
        reason: reason.unwrap_or_else(|| "no start converged".into()),
    })
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(theta_x' Sigma1 theta_x, Sigma theta)` in design coordinates,
/// where the design may carry a leading intercept.
fn split_design(theta: &Vector, data: &Dataset, model: &ErrorModel) -> (f64, Vector) {
    let off = usize::from(data.intercept());
    let p1 = data.p1();
    let tx = theta.rows(off, p1).into_owned();
    let quad = tx.dot(&(model.sigma1() * &tx));
    let mut sigma_theta = Vector::zeros(theta.len());
    sigma_theta
        .rows_mut(off, p1)
        .copy_from(&(model.sigma1() * &tx));
    (quad, sigma_theta)
}

fn check_normal(model: &ErrorModel) -> Result<()> {
    if !matches!(model.family(), crate::error_model::ErrorFamily::Normal) {
        return Err(Error::Unsupported(
            "corrected CBPS requires a normal error model".into(),
        ));
    }
    Ok(())
}

/// Per-observation corrected CBPS contributions: conditional score rows and
/// `(n / n1)[(1 - T)(Z* - Sigma theta) exp(theta'Z* - q/2) - T Z*]` rows.
fn corrected_contributions(
    z: &Matrix,
    data: &Dataset,
    model: &ErrorModel,
    theta: &Vector,
) -> Result<Matrix> {
    let n = z.nrows();
    let k = z.ncols();
    let (quad, sigma_theta) = split_design(theta, data, model);
    let lin = z * theta;
    let scale = n as f64 / data.n_treated() as f64;
    let mut c = Matrix::zeros(n, 2 * k);
    for (i, s) in data.subjects().iter().enumerate() {
        let t = if s.treated { 1.0 } else { 0.0 };
        let pi = expit(lin[i] + (t - 0.5) * quad);
        for a in 0..k {
            c[(i, a)] = (t - pi) * z[(i, a)];
        }
        if s.treated {
            for a in 0..k {
                c[(i, k + a)] = -scale * z[(i, a)];
            }
        } else {
            let expo = lin[i] - 0.5 * quad;
            if expo.abs() > MAX_EXPONENT {
                return Err(Error::NonFiniteExp {
                    exponent: expo,
                    subject: Some(s.id.clone()),
                });
            }
            let e = expo.exp();
            for a in 0..k {
                c[(i, k + a)] = scale * e * (z[(i, a)] - sigma_theta[a]);
            }
        }
    }
    Ok(c)
}

/// Conditional score `sum_i [T_i - expit(theta'Z*_i + (T_i - 1/2) q)] Z*_i`
/// with `q = theta_x' Sigma1 theta_x`. `theta` is in design coordinates
/// (leading intercept when the dataset has one).
pub fn conditional_score(
    theta: &Vector,
    data: &Dataset,
    model: &ErrorModel,
    policy: ReplicatePolicy,
) -> Result<Vector> {
    let z = design_matrix(data, policy)?;
    check_dim(theta, z.ncols())?;
    let (quad, _) = split_design(theta, data, model);
    let lin = &z * theta;
    let mut out = Vector::zeros(z.ncols());
    for (i, s) in data.subjects().iter().enumerate() {
        let t = if s.treated { 1.0 } else { 0.0 };
        let r = t - expit(lin[i] + (t - 0.5) * quad);
        out += z.row(i).transpose() * r;
    }
    Ok(out)
}

/// Analytic Jacobian of [`conditional_score`]:
/// `-sum_i p_i (1 - p_i) Z*_i (Z*_i + (2 T_i - 1) Sigma theta)'`.
pub fn conditional_score_jacobian(
    theta: &Vector,
    data: &Dataset,
    model: &ErrorModel,
    policy: ReplicatePolicy,
) -> Result<Matrix> {
    let z = design_matrix(data, policy)?;
    check_dim(theta, z.ncols())?;
    Ok(score_jacobian(&z, data, model, theta))
}

fn score_jacobian(z: &Matrix, data: &Dataset, model: &ErrorModel, theta: &Vector) -> Matrix {
    let (quad, sigma_theta) = split_design(theta, data, model);
    let lin = z * theta;
    let k = z.ncols();
    let mut jac = Matrix::zeros(k, k);
    for (i, s) in data.subjects().iter().enumerate() {
        let t = if s.treated { 1.0 } else { 0.0 };
        let pi = expit(lin[i] + (t - 0.5) * quad);
        let zi = z.row(i).transpose();
        let dir = &zi + &sigma_theta * (2.0 * t - 1.0);
        jac.ger(-pi * (1.0 - pi), &zi, &dir, 1.0);
    }
    jac
}

/// Jacobian of the mean corrected CBPS contributions (`2k x k`).
fn corrected_jacobian(z: &Matrix, data: &Dataset, model: &ErrorModel, theta: &Vector) -> Matrix {
    let n = z.nrows() as f64;
    let k = z.ncols();
    let (quad, sigma_theta) = split_design(theta, data, model);
    let off = usize::from(data.intercept());
    let p1 = data.p1();
    let scale = n / data.n_treated() as f64;
    let mut bottom = Matrix::zeros(k, k);
    let mut mass = 0.0;
    for &i in data.control_indices() {
        let zi = z.row(i).transpose();
        let e = (zi.dot(theta) - 0.5 * quad).exp();
        let d = &zi - &sigma_theta;
        bottom.ger(scale * e, &d, &d, 1.0);
        mass += scale * e;
    }
    bottom
        .view_mut((off, off), (p1, p1))
        .zip_apply(model.sigma1(), |b, s| *b -= mass * s);
    let mut jac = Matrix::zeros(2 * k, k);
    jac.view_mut((0, 0), (k, k)).copy_from(&(score_jacobian(z, data, model, theta) / n));
    jac.view_mut((k, 0), (k, k)).copy_from(&(bottom / n));
    jac
}

/// Corrected balancing moments
/// `n1^-1 sum_{T=0} (Z* - Sigma theta) exp(theta'Z* - q/2) - Zbar*_trt`.
pub fn c_hw_moments(
    theta: &Vector,
    data: &Dataset,
    model: &ErrorModel,
    policy: ReplicatePolicy,
) -> Result<Vector> {
    let z = design_matrix(data, policy)?;
    check_dim(theta, z.ncols())?;
    let c = corrected_contributions(&z, data, model, theta)?;
    let k = z.ncols();
    Ok(Vector::from_fn(k, |a, _| c.column(k + a).mean()))
}

/// Corrected CBPS: two-step GMM on the stacked conditional score (scaled by
/// `1/n`) and corrected balancing moments.
pub fn solve_corrected_cbps(data: &Dataset, spec: &CorrectionSpec) -> Result<BalanceFit> {
    spec.solver.validate()?;
    let model = spec.model_for(data)?;
    check_normal(model)?;
    let z = design_matrix(data, spec.replicate_policy)?;
    fit_gmm(data, &z, &spec.solver, Method::CorrectedCbps, |t, want| {
        let c = corrected_contributions(&z, data, model, t)?;
        let mean = Vector::from_fn(c.ncols(), |j, _| c.column(j).mean());
        Ok(MomentEval {
            mean,
            contributions: want.then_some(c),
            jacobian: Some(corrected_jacobian(&z, data, model, t)),
        })
    })
}

/// Gradient of the corrected CEB loss, exposed for diagnostics.
pub fn ceb_gradient(
    theta: &Vector,
    data: &Dataset,
    model: &ErrorModel,
    policy: ReplicatePolicy,
) -> Result<Vector> {
    let dual = EbDual::new(data, policy)?;
    check_dim(theta, dual.dim())?;
    Ok(ceb_objective(theta, &dual, model)?.1)
}
