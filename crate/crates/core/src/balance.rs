//! Uncorrected entropy balancing and CBPS, plus the weighting ATT estimator.
//!
//! Each solver reads covariates through a [`ReplicatePolicy`]; pass a dataset
//! built from true covariates to get the error-free fit.

use serde::{Deserialize, Serialize};

use crate::data::{BalanceFit, Dataset, Method, ReplicatePolicy, WeightVector};
use crate::error::{Error, Result};
use crate::linalg::{inf_norm, log_sum_exp, Matrix, Vector};
use crate::solver::{gmm_two_step, minimize, MinimizeOutcome, MomentEval, SolverConfig};

pub const INFEASIBLE_HULL: &str = "infeasible_hull";
pub const SINGULAR_GMM_WEIGHT: &str = "singular_gmm_weight";

/// Value, gradient and Hessian of the EB dual.
pub type DualEval = (f64, Vector, Matrix);

/// The EB dual `log sum_{T=0} exp(theta'Z) - theta' Zbar_trt` for a fixed
/// control design and target mean.
#[derive(Debug, Clone)]
pub struct EbDual {
    control: Matrix,
    target: Vector,
}

impl EbDual {
    pub fn new(data: &Dataset, policy: ReplicatePolicy) -> Result<Self> {
        let z = data.covariates(policy)?;
        Ok(Self::from_matrix(&z, data))
    }

    /// From an `n x p` covariate matrix aligned with `data`'s rows.
    pub fn from_matrix(z: &Matrix, data: &Dataset) -> Self {
        let p = z.ncols();
        let ctrl = data.control_indices();
        let control = Matrix::from_fn(ctrl.len(), p, |r, j| z[(ctrl[r], j)]);
        let mut target = Vector::zeros(p);
        for &i in data.treated_indices() {
            target += z.row(i).transpose();
        }
        target /= data.n_treated() as f64;
        Self { control, target }
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }
    pub fn target(&self) -> &Vector {
        &self.target
    }
    pub fn control(&self) -> &Matrix {
        &self.control
    }

    /// Softmax weights over the control rows.
    pub fn softmax(&self, theta: &Vector) -> (f64, Vector) {
        log_sum_exp(&(&self.control * theta))
    }

    pub fn eval(&self, theta: &Vector) -> DualEval {
        let (lse, w) = self.softmax(theta);
        let mean = self.control.tr_mul(&w);
        let value = lse - theta.dot(&self.target);
        let grad = &mean - &self.target;
        let p = self.dim();
        let mut hess = Matrix::zeros(p, p);
        let mut d = Vector::zeros(p);
        for (r, wr) in w.iter().enumerate() {
            for j in 0..p {
                d[j] = self.control[(r, j)] - mean[j];
            }
            hess.syger(*wr, &d, &d, 1.0);
        }
        hess.fill_upper_triangle_with_lower_triangle();
        (value, grad, hess)
    }

    /// Treated-mean coordinates outside the control range.
    pub fn hull_violations(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&j| {
                let col = self.control.column(j);
                self.target[j] < col.min() || self.target[j] > col.max()
            })
            .collect()
    }
}

/// EB dual objective with gradient and (weighted-covariance) Hessian.
pub fn eb_dual_objective(
    theta: &Vector,
    data: &Dataset,
    policy: ReplicatePolicy,
) -> Result<DualEval> {
    let dual = EbDual::new(data, policy)?;
    check_dim(theta, dual.dim())?;
    Ok(dual.eval(theta))
}

pub(crate) fn check_dim(theta: &Vector, p: usize) -> Result<()> {
    if theta.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "theta has {} entries, expected {p}",
            theta.len()
        )));
    }
    Ok(())
}

pub(crate) fn not_converged(out: &MinimizeOutcome) -> Error {
    Error::NotConverged {
        iterations: out.iterations,
        grad_norm: out.grad_norm,
        reason: out
            .failure
            .clone()
            .unwrap_or_else(|| "gradient tolerance not met".into()),
    }
}

/// Normalised weights from control scores `theta'Z` via softmax.
pub(crate) fn softmax_weights(data: &Dataset, scores: &Vector) -> Result<WeightVector> {
    let (_, w) = log_sum_exp(scores);
    WeightVector::from_unnormalized(data.control_indices().to_vec(), w.iter().copied().collect())
}

/// Entropy balancing by Newton's method on the dual, started at zero.
pub fn solve_eb(data: &Dataset, cfg: &SolverConfig, policy: ReplicatePolicy) -> Result<BalanceFit> {
    cfg.validate()?;
    let dual = EbDual::new(data, policy)?;
    let mut warnings = Vec::new();
    let outside = dual.hull_violations();
    if !outside.is_empty() {
        log::warn!("treated mean outside control range in coordinates {outside:?}");
        warnings.push(INFEASIBLE_HULL.to_string());
    }
    let out = minimize(|t| Ok(dual.eval(t)), Vector::zeros(dual.dim()), cfg)?;
    if !out.converged {
        return Err(not_converged(&out));
    }
    let weights = softmax_weights(data, &(dual.control() * &out.x))?;
    Ok(BalanceFit {
        theta: out.x.iter().copied().collect(),
        weights,
        converged: true,
        grad_norm: out.grad_norm,
        iterations: out.iterations,
        method: Method::Eb,
        warnings,
    })
}

/// Which CBPS moment stack to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbpsVariant {
    /// Likelihood score and balancing conditions, two-step GMM.
    #[default]
    OverIdentified,
    /// Balancing conditions only; balance holds exactly at the solution.
    JustIdentified,
}

impl std::str::FromStr for CbpsVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "over_identified" => Ok(Self::OverIdentified),
            "just_identified" => Ok(Self::JustIdentified),
            other => Err(Error::InvalidConfig(format!(
                "cbps_variant must be over_identified or just_identified, got {other:?}"
            ))),
        }
    }
}

/// Covariates with a leading constant column when the dataset asks for one.
pub fn design_matrix(data: &Dataset, policy: ReplicatePolicy) -> Result<Matrix> {
    let z = data.covariates(policy)?;
    Ok(with_intercept(&z, data.intercept()))
}

pub(crate) fn with_intercept(z: &Matrix, intercept: bool) -> Matrix {
    if !intercept {
        return z.clone();
    }
    let mut out = Matrix::from_element(z.nrows(), z.ncols() + 1, 1.0);
    out.view_mut((0, 1), (z.nrows(), z.ncols())).copy_from(z);
    out
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-observation CBPS moment contributions for design `z` (`n x k`).
/// Score rows are `(T - pi) Z`; balance rows are
/// `(n / n1) [(1 - T) exp(theta'Z) - T] Z`, whose mean is the balancing block.
pub(crate) fn cbps_contributions(
    z: &Matrix,
    treated: &[bool],
    theta: &Vector,
    score: bool,
) -> Result<MomentEval> {
    let n = z.nrows();
    let k = z.ncols();
    let n1 = treated.iter().filter(|t| **t).count() as f64;
    let q = if score { 2 * k } else { k };
    let lin = z * theta;
    let scale = n as f64 / n1;
    let mut c = Matrix::zeros(n, q);
    let mut jac = Matrix::zeros(q, k);
    for i in 0..n {
        let row = z.row(i);
        let off = if score { k } else { 0 };
        if score {
            let pi = expit(lin[i]);
            let t = if treated[i] { 1.0 } else { 0.0 };
            let d = pi * (1.0 - pi);
            for a in 0..k {
                c[(i, a)] = (t - pi) * row[a];
                for b in 0..k {
                    jac[(a, b)] -= d * row[a] * row[b];
                }
            }
        }
        if treated[i] {
            for a in 0..k {
                c[(i, off + a)] = -scale * row[a];
            }
        } else {
            if lin[i].abs() > crate::error_model::MAX_EXPONENT {
                return Err(Error::NonFiniteExp {
                    exponent: lin[i],
                    subject: None,
                });
            }
            let e = lin[i].exp();
            for a in 0..k {
                c[(i, off + a)] = scale * e * row[a];
                for b in 0..k {
                    jac[(off + a, b)] += scale * e * row[a] * row[b];
                }
            }
        }
    }
    let mean = Vector::from_fn(q, |j, _| c.column(j).mean());
    Ok(MomentEval {
        mean,
        contributions: Some(c),
        jacobian: Some(jac / n as f64),
    })
}

/// Stacked CBPS moments: logistic score `sum (T - pi) Z` followed by the
/// balancing block `n1^-1 sum_{T=0} exp(theta'Z) Z - Zbar_trt`.
pub fn cbps_moments(theta: &Vector, data: &Dataset, policy: ReplicatePolicy) -> Result<Vector> {
    let z = design_matrix(data, policy)?;
    check_dim(theta, z.ncols())?;
    let treated: Vec<bool> = data.subjects().iter().map(|s| s.treated).collect();
    let m = cbps_contributions(&z, &treated, theta, true)?;
    let k = z.ncols();
    let mut out = m.mean;
    let n = data.n() as f64;
    for a in 0..k {
        out[a] *= n;
    }
    Ok(out)
}

/// CBPS by two-step GMM, started at zero. Weights are
/// `exp(theta'Z)` over controls, normalised.
pub fn solve_cbps(
    data: &Dataset,
    cfg: &SolverConfig,
    policy: ReplicatePolicy,
    variant: CbpsVariant,
) -> Result<BalanceFit> {
    cfg.validate()?;
    let z = design_matrix(data, policy)?;
    let treated: Vec<bool> = data.subjects().iter().map(|s| s.treated).collect();
    fit_gmm(data, &z, cfg, Method::Cbps, |t, want| {
        let mut m = cbps_contributions(&z, &treated, t, variant == CbpsVariant::OverIdentified)?;
        if !want {
            m.contributions = None;
        }
        Ok(m)
    })
}

/// Shared GMM driver for naive and corrected CBPS.
pub(crate) fn fit_gmm<F>(
    data: &Dataset,
    z: &Matrix,
    cfg: &SolverConfig,
    method: Method,
    moments: F,
) -> Result<BalanceFit>
where
    F: Fn(&Vector, bool) -> Result<MomentEval>,
{
    let out = gmm_two_step(moments, Vector::zeros(z.ncols()), cfg)?;
    if !out.converged {
        return Err(Error::NotConverged {
            iterations: out.iterations,
            grad_norm: out.grad_norm,
            reason: out
                .failure
                .unwrap_or_else(|| "gradient tolerance not met".into()),
        });
    }
    let mut warnings = Vec::new();
    if out.singular_weight {
        warnings.push(SINGULAR_GMM_WEIGHT.to_string());
    }
    let ctrl = data.control_indices();
    let scores = Vector::from_fn(ctrl.len(), |r, _| z.row(ctrl[r]).dot(&out.theta.transpose()));
    Ok(BalanceFit {
        theta: out.theta.iter().copied().collect(),
        weights: softmax_weights(data, &scores)?,
        converged: true,
        grad_norm: out.grad_norm,
        iterations: out.iterations,
        method,
        warnings,
    })
}

/// Weighting ATT estimator `Ybar_trt - sum_{T=0} w_i Y_i`.
pub fn att(weights: &WeightVector, data: &Dataset) -> Result<f64> {
    let y = data.outcomes()?;
    if weights.control_rows() != data.control_indices() {
        return Err(Error::DimensionMismatch(
            "weights are not aligned with the dataset's control subjects".into(),
        ));
    }
    let treated = data.treated_indices();
    let ybar = treated.iter().map(|&i| y[i]).sum::<f64>() / treated.len() as f64;
    let control: f64 = weights
        .control_rows()
        .iter()
        .zip(weights.weights())
        .map(|(&i, w)| w * y[i])
        .sum();
    Ok(ybar - control)
}

/// Max-norm of the weighted control mean minus the treated mean.
pub fn balance_gap(weights: &WeightVector, z: &Matrix, data: &Dataset) -> f64 {
    let p = z.ncols();
    let mut gap = Vector::zeros(p);
    for (&i, w) in weights.control_rows().iter().zip(weights.weights()) {
        gap += z.row(i).transpose() * *w;
    }
    for &i in data.treated_indices() {
        gap -= z.row(i).transpose() / data.n_treated() as f64;
    }
    inf_norm(&gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Subject;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn subject(i: usize, treated: bool, x: &[f64], y: Option<f64>) -> Subject {
        Subject {
            id: format!("s{i}"),
            treated,
            outcome: y,
            x_star: vec![x.to_vec()],
            u: vec![],
        }
    }

    fn random_data(seed: u64, n: usize, p: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                let lin = 0.3 * x[0] - 0.2 * x.get(1).copied().unwrap_or(0.0);
                let t = rng.gen::<f64>() < expit(lin);
                subject(i, t || i == 0, &x, Some(x[0] + rng.sample::<f64, _>(StandardNormal)))
            })
            .collect::<Vec<_>>();
        let mut subjects = subjects;
        subjects[1].treated = false;
        Dataset::from_subjects(subjects).unwrap()
    }

    const FIRST: ReplicatePolicy = ReplicatePolicy::First;

    #[test]
    fn dual_at_zero_is_log_n0_and_mean_gap() {
        let d = random_data(1, 30, 2);
        let (v, g, _) = eb_dual_objective(&Vector::zeros(2), &d, FIRST).unwrap();
        assert_relative_eq!(v, (d.n_control() as f64).ln(), epsilon = 1e-12);
        let z = d.covariates(FIRST).unwrap();
        let mean = |idx: &[usize], j: usize| idx.iter().map(|&i| z[(i, j)]).sum::<f64>() / idx.len() as f64;
        for j in 0..2 {
            assert_relative_eq!(
                g[j],
                mean(d.control_indices(), j) - mean(d.treated_indices(), j),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn single_control_gradient_is_constant() {
        let d = Dataset::from_subjects(vec![
            subject(0, true, &[1.0, 2.0], None),
            subject(1, true, &[3.0, -1.0], None),
            subject(2, false, &[0.5, 0.5], None),
        ])
        .unwrap();
        for t in [[0.0, 0.0], [3.0, -7.0]] {
            let (_, g, _) = eb_dual_objective(&Vector::from_column_slice(&t), &d, FIRST).unwrap();
            assert_relative_eq!(g[0], 0.5 - 2.0, epsilon = 1e-12);
            assert_relative_eq!(g[1], 0.5 - 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn dual_derivatives_match_finite_differences() {
        let d = random_data(2, 10, 3);
        let dual = EbDual::new(&d, FIRST).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = Vector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let (_, g, h) = dual.eval(&theta);
        let eps = 1e-5;
        for j in 0..3 {
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[j] += eps;
            b[j] -= eps;
            let (fa, ga, _) = dual.eval(&a);
            let (fb, gb, _) = dual.eval(&b);
            assert!(((fa - fb) / (2.0 * eps) - g[j]).abs() < 1e-6);
            let col = (ga - gb) / (2.0 * eps);
            for i in 0..3 {
                assert!((col[i] - h[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_arms_give_zero_theta_and_uniform_weights() {
        let rows = [[0.0, 1.0], [1.0, -1.0], [2.0, 0.5]];
        let mut subjects = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            subjects.push(subject(i, true, r, None));
            subjects.push(subject(i + 10, false, r, None));
        }
        let d = Dataset::from_subjects(subjects).unwrap();
        let fit = solve_eb(&d, &SolverConfig::default(), FIRST).unwrap();
        assert!(fit.theta.iter().all(|t| t.abs() < 1e-12));
        for w in fit.weights.weights() {
            assert_relative_eq!(*w, 1.0 / 3.0, epsilon = 1e-12);
        }
        let cb = solve_cbps(&d, &SolverConfig::default(), FIRST, CbpsVariant::OverIdentified).unwrap();
        let m = cbps_moments(&cb.theta_vector(), &d, FIRST).unwrap();
        assert!(m.rows(3, 3).amax() < 1e-8);
    }

    #[test]
    fn eb_weights_balance_exactly() {
        for seed in 0..5 {
            let d = random_data(seed, 200, 3);
            let fit = solve_eb(&d, &SolverConfig::default(), FIRST).unwrap();
            let z = d.covariates(FIRST).unwrap();
            assert!(balance_gap(&fit.weights, &z, &d) < 1e-6);
        }
    }

    #[test]
    fn eb_matches_grid_search_on_six_subjects() {
        let d = Dataset::from_subjects(vec![
            subject(0, true, &[0.2, 1.0], None),
            subject(1, true, &[0.9, -0.3], None),
            subject(2, false, &[0.0, 0.0], None),
            subject(3, false, &[1.0, 0.5], None),
            subject(4, false, &[-0.5, 1.5], None),
            subject(5, false, &[1.4, -1.0], None),
        ])
        .unwrap();
        let fit = solve_eb(&d, &SolverConfig::default(), FIRST).unwrap();
        let dual = EbDual::new(&d, FIRST).unwrap();
        // coarse grid, then a 1e-3 grid around the coarse minimiser
        let search = |c: (f64, f64), half: f64, step: f64| {
            let k = (2.0 * half / step).round() as i64;
            let mut best = (f64::INFINITY, 0.0, 0.0);
            for a in 0..=k {
                for b in 0..=k {
                    let t = Vector::from_vec(vec![c.0 - half + a as f64 * step, c.1 - half + b as f64 * step]);
                    let v = dual.eval(&t).0;
                    if v < best.0 {
                        best = (v, t[0], t[1]);
                    }
                }
            }
            (best.1, best.2)
        };
        let coarse = search((0.0, 0.0), 5.0, 0.05);
        let fine = search(coarse, 0.1, 1e-3);
        assert!((fit.theta[0] - fine.0).abs() < 2e-3);
        assert!((fit.theta[1] - fine.1).abs() < 2e-3);
    }

    #[test]
    fn hull_violation_is_flagged() {
        let d = Dataset::from_subjects(vec![
            subject(0, true, &[5.0], None),
            subject(1, false, &[0.0], None),
            subject(2, false, &[1.0], None),
        ])
        .unwrap();
        let err = solve_eb(&d, &SolverConfig::default(), FIRST);
        match err {
            Err(Error::NotConverged { .. }) => {}
            Ok(fit) => assert!(fit.warnings.contains(&INFEASIBLE_HULL.to_string())),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn cbps_moments_match_direct_formulas() {
        let d = random_data(4, 20, 2);
        let theta = Vector::from_vec(vec![0.1, -0.4, 0.3]);
        let m = cbps_moments(&theta, &d, FIRST).unwrap();
        let mut score = Vector::zeros(3);
        let mut bal = Vector::zeros(3);
        let n1 = d.n_treated() as f64;
        for s in d.subjects() {
            let z = Vector::from_vec(vec![1.0, s.x_star[0][0], s.x_star[0][1]]);
            let lin = theta.dot(&z);
            let pi = 1.0 / (1.0 + (-lin).exp());
            let t = if s.treated { 1.0 } else { 0.0 };
            score += &z * (t - pi);
            if s.treated {
                bal -= &z / n1;
            } else {
                bal += &z * (pi / (1.0 - pi)) / n1;
            }
        }
        for a in 0..3 {
            assert_relative_eq!(m[a], score[a], epsilon = 1e-12);
            assert_relative_eq!(m[3 + a], bal[a], epsilon = 1e-12);
        }
    }

    #[test]
    fn cbps_score_is_loglik_gradient() {
        let d = random_data(5, 25, 2);
        let z = design_matrix(&d, FIRST).unwrap();
        let loglik = |t: &Vector| -> f64 {
            d.subjects()
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let lin = z.row(i).transpose().dot(t);
                    if s.treated {
                        -(1.0 + (-lin).exp()).ln()
                    } else {
                        -(1.0 + lin.exp()).ln()
                    }
                })
                .sum()
        };
        let theta = Vector::from_vec(vec![0.2, 0.5, -0.7]);
        let m = cbps_moments(&theta, &d, FIRST).unwrap();
        for j in 0..3 {
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (loglik(&a) - loglik(&b)) / 2e-6;
            assert!((fd - m[j]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn cbps_theta_zero_equal_arms_score_is_half_offsets() {
        let d = random_data(6, 20, 2);
        let m = cbps_moments(&Vector::zeros(3), &d, FIRST).unwrap();
        let mut expect = Vector::zeros(3);
        for s in d.subjects() {
            let t = if s.treated { 0.5 } else { -0.5 };
            expect += Vector::from_vec(vec![1.0, s.x_star[0][0], s.x_star[0][1]]) * t;
        }
        assert_relative_eq!(m.rows(0, 3).into_owned(), expect, epsilon = 1e-12);
    }

    #[test]
    fn cbps_beats_random_search_on_gmm_objective() {
        let d = random_data(7, 10, 1);
        let cfg = SolverConfig::default();
        let fit = solve_cbps(&d, &cfg, FIRST, CbpsVariant::OverIdentified).unwrap();
        let z = design_matrix(&d, FIRST).unwrap();
        let treated: Vec<bool> = d.subjects().iter().map(|s| s.treated).collect();
        let moments = |t: &Vector, _: bool| cbps_contributions(&z, &treated, t, true);
        // weight matrix used in the second step
        let first = gmm_two_step(moments, Vector::zeros(2), &cfg).unwrap();
        let w = first.weight_matrix;
        let obj = |t: &Vector| crate::solver::gmm_objective(&moments, t, &w).unwrap();
        let at_fit = obj(&fit.theta_vector());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let t = Vector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0));
            assert!(at_fit <= obj(&t) + 1e-10);
        }
    }

    #[test]
    fn just_identified_cbps_balances_exactly() {
        let d = random_data(8, 300, 3);
        let fit = solve_cbps(&d, &SolverConfig::default(), FIRST, CbpsVariant::JustIdentified).unwrap();
        let z = d.covariates(FIRST).unwrap();
        assert!(balance_gap(&fit.weights, &z, &d) < 1e-6);
    }

    #[test]
    fn att_hand_arithmetic() {
        let d = Dataset::from_subjects(vec![
            subject(0, true, &[0.0], Some(6.0)),
            subject(1, true, &[0.0], Some(8.0)),
            subject(2, false, &[0.0], Some(5.0)),
            subject(3, false, &[0.0], Some(9.0)),
        ])
        .unwrap();
        let w = WeightVector::new(vec![2, 3], vec![1.0, 0.0]).unwrap();
        assert_relative_eq!(att(&w, &d).unwrap(), 2.0);
        let u = WeightVector::uniform(vec![2, 3]).unwrap();
        assert_relative_eq!(att(&u, &d).unwrap(), 0.0);
    }

    #[test]
    fn att_requires_outcome() {
        let d = Dataset::from_subjects(vec![
            subject(0, true, &[0.0], None),
            subject(1, false, &[0.0], None),
        ])
        .unwrap();
        let w = WeightVector::uniform(vec![1]).unwrap();
        assert_eq!(att(&w, &d), Err(Error::MissingOutcome));
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(scores in proptest::collection::vec(-50.0f64..50.0, 1..20), c in -500.0f64..500.0) {
            let s = Vector::from_vec(scores);
            let (_, a) = log_sum_exp(&s);
            let (_, b) = log_sum_exp(&s.add_scalar(c));
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn eb_objective_never_increases(seed in 0u64..200) {
            let d = random_data(seed, 60, 2);
            let dual = EbDual::new(&d, FIRST).unwrap();
            if let Ok(out) = minimize(|t| Ok(dual.eval(t)), Vector::zeros(2), &SolverConfig::default()) {
                for w in out.trace.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
                }
            }
        }
    }
}
