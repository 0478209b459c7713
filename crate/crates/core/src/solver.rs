//! Numerical engines shared by the estimators: damped Newton minimisation,
//! damped Newton root finding with finite-difference Jacobians, and
//! two-step GMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{descent_direction, inf_norm, Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Backtracking step shrink factor.
    pub shrink: f64,
    /// Armijo sufficient-decrease constant.
    pub sufficient_decrease: f64,
    /// Random restarts for non-convex corrected problems.
    pub multi_start: usize,
    pub restart_scale: f64,
    /// Relative finite-difference step for estimating-function Jacobians.
    pub fd_step: f64,
    /// Iterates with a coordinate beyond this magnitude count as diverged.
    pub theta_bound: f64,
    /// Seed for restart perturbations.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 200,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            multi_start: 5,
            restart_scale: 0.5,
            fd_step: 1e-6,
            theta_bound: 1e4,
            seed: 0x5eed,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig("grad_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidConfig("shrink must lie in (0, 1)".into()));
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 0.5) {
            return Err(Error::InvalidConfig(
                "sufficient_decrease must lie in (0, 0.5)".into(),
            ));
        }
        if !(self.fd_step > 0.0) || !(self.theta_bound > 0.0) || !(self.restart_scale >= 0.0) {
            return Err(Error::InvalidConfig(
                "fd_step, theta_bound must be positive and restart_scale nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Result of [`minimize`].
#[derive(Debug, Clone)]
pub struct MinimizeOutcome {
    pub x: Vector,
    pub value: f64,
    pub grad: Vector,
    pub hess: Matrix,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub failure: Option<String>,
    /// Objective at every accepted iterate, starting with `x0`.
    pub trace: Vec<f64>,
}

type Eval = (f64, Vector, Matrix);

/// Newton's method with Armijo backtracking. The Hessian is ridge-modified
/// until positive definite; steepest descent is the last resort.
/// Convergence means `||grad||_inf <= cfg.grad_tol`.
pub fn minimize<F>(f: F, x0: Vector, cfg: &SolverConfig) -> Result<MinimizeOutcome>
where
    F: Fn(&Vector) -> Result<Eval>,
{
    let (mut value, mut grad, mut hess) = f(&x0)?;
    if !value.is_finite() {
        return Err(Error::NotConverged {
            iterations: 0,
            grad_norm: f64::NAN,
            reason: "objective is not finite at the starting point".into(),
        });
    }
    let mut x = x0;
    let mut trace = vec![value];
    let mut iterations = 0;
    let mut failure = None;
    loop {
        let gnorm = inf_norm(&grad);
        if gnorm <= cfg.grad_tol {
            break;
        }
        if iterations >= cfg.max_iter {
            failure = Some("iteration limit reached".to_string());
            break;
        }
        iterations += 1;
        let newton = descent_direction(&hess, &grad, 1e-10).filter(|d| grad.dot(d) < 0.0);
        let mut accepted = None;
        for dir in newton.into_iter().chain(std::iter::once(-&grad)) {
            if let Some(step) = line_search(&f, &x, value, &grad, &dir, cfg) {
                accepted = Some(step);
                break;
            }
        }
        match accepted {
            Some((xn, (v, g, h))) => {
                x = xn;
                value = v;
                grad = g;
                hess = h;
                trace.push(value);
                if inf_norm(&x) > cfg.theta_bound {
                    failure = Some("iterates diverged".to_string());
                    break;
                }
            }
            None => {
                failure = Some("line search failed".to_string());
                break;
            }
        }
    }
    let grad_norm = inf_norm(&grad);
    Ok(MinimizeOutcome {
        converged: grad_norm <= cfg.grad_tol && failure.is_none(),
        x,
        value,
        grad,
        hess,
        grad_norm,
        iterations,
        failure,
        trace,
    })
}

fn line_search<F>(
    f: &F,
    x: &Vector,
    value: f64,
    grad: &Vector,
    dir: &Vector,
    cfg: &SolverConfig,
) -> Option<(Vector, Eval)>
where
    F: Fn(&Vector) -> Result<Eval>,
{
    let slope = grad.dot(dir);
    let gnorm = inf_norm(grad);
    // Rounding slack: near the optimum objective differences vanish below
    // machine precision while the gradient can still be reduced.
    let slack = 8.0 * f64::EPSILON * value.abs().max(1.0);
    let mut alpha = 1.0;
    while alpha > 1e-14 {
        let xn = x + dir * alpha;
        if let Ok((v, g, h)) = f(&xn) {
            if v.is_finite() {
                let armijo = v <= value + cfg.sufficient_decrease * alpha * slope;
                let flat = v <= value + slack && inf_norm(&g) < 0.5 * gnorm;
                if armijo || flat {
                    return Some((xn, (v, g, h)));
                }
            }
        }
        alpha *= cfg.shrink;
    }
    None
}

/// Central-difference Jacobian of `f` at `x` (rows: outputs, columns: inputs).
pub fn fd_jacobian<F>(f: &F, x: &Vector, rel_step: f64) -> Result<Matrix>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let k = x.len();
    let mut cols = Vec::with_capacity(k);
    for j in 0..k {
        let h = rel_step * x[j].abs().max(1.0);
        let mut a = x.clone();
        let mut b = x.clone();
        a[j] += h;
        b[j] -= h;
        cols.push((f(&a)? - f(&b)?) / (2.0 * h));
    }
    Ok(Matrix::from_columns(&cols))
}

#[derive(Debug, Clone)]
pub struct RootOutcome {
    pub x: Vector,
    pub residual: Vector,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub failure: Option<String>,
}

/// Iterations over which the root-finding merit must fall by 1%.
const STALL_WINDOW: usize = 10;

/// Damped Newton for `f(x) = 0` with finite-difference Jacobian and a
/// Levenberg-Marquardt fallback; merit function `||f||^2 / 2`.
pub fn find_root<F>(f: F, x0: Vector, cfg: &SolverConfig) -> Result<RootOutcome>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let mut x = x0;
    let mut fx = f(&x)?;
    if fx.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotConverged {
            iterations: 0,
            grad_norm: f64::NAN,
            reason: "estimating function is not finite at the starting point".into(),
        });
    }
    let mut iterations = 0;
    let mut failure = None;
    let mut merits = Vec::new();
    loop {
        if inf_norm(&fx) <= cfg.grad_tol {
            break;
        }
        if iterations >= cfg.max_iter {
            failure = Some("iteration limit reached".to_string());
            break;
        }
        let merit = 0.5 * fx.norm_squared();
        if merits.len() >= STALL_WINDOW && merit > 0.99 * merits[merits.len() - STALL_WINDOW] {
            failure = Some("residual stalled away from zero".to_string());
            break;
        }
        merits.push(merit);
        iterations += 1;
        let jac = fd_jacobian(&f, &x, cfg.fd_step)?;
        let mut directions: Vec<Vector> = Vec::new();
        if let Some(d) = jac.clone().lu().solve(&(-&fx)) {
            if d.iter().all(|v| v.is_finite()) {
                directions.push(d);
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtf = jac.transpose() * &fx;
        let scale = jtj.diagonal().amax().max(1e-12);
        for lambda in [1e-6, 1e-3, 1e-1, 1.0, 10.0] {
            let m = &jtj + Matrix::identity(x.len(), x.len()) * (lambda * scale);
            if let Some(ch) = m.cholesky() {
                directions.push(-ch.solve(&jtf));
            }
        }
        let mut accepted = None;
        'dirs: for d in directions {
            let mut alpha = 1.0;
            while alpha > 1e-10 {
                let xn = &x + &d * alpha;
                if let Ok(fnew) = f(&xn) {
                    if fnew.iter().all(|v| v.is_finite()) {
                        let m_new = 0.5 * fnew.norm_squared();
                        if m_new <= (1.0 - 2.0 * cfg.sufficient_decrease * alpha) * merit {
                            accepted = Some((xn, fnew));
                            break 'dirs;
                        }
                    }
                }
                alpha *= cfg.shrink;
            }
        }
        match accepted {
            Some((xn, fnew)) => {
                x = xn;
                fx = fnew;
                if inf_norm(&x) > cfg.theta_bound {
                    failure = Some("iterates diverged".to_string());
                    break;
                }
            }
            None => {
                failure = Some("no step reduces the residual".to_string());
                break;
            }
        }
    }
    let residual_norm = inf_norm(&fx);
    Ok(RootOutcome {
        converged: residual_norm <= cfg.grad_tol && failure.is_none(),
        x,
        residual: fx,
        residual_norm,
        iterations,
        failure,
    })
}

/// Moment conditions evaluated at a parameter.
#[derive(Debug, Clone)]
pub struct MomentEval {
    /// Sample mean of the moment contributions (length `q`).
    pub mean: Vector,
    /// Per-observation contributions (`n x q`), when requested.
    pub contributions: Option<Matrix>,
    /// Jacobian of `mean` (`q x k`), when available analytically.
    pub jacobian: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct GmmOutcome {
    pub theta: Vector,
    pub objective: f64,
    pub weight_matrix: Matrix,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The second-step weight matrix was singular; identity was used.
    pub singular_weight: bool,
    pub failure: Option<String>,
}

/// `gbar' W gbar` with its gradient and Hessian. With an analytic moment
/// Jacobian the Hessian is the central difference of the exact gradient;
/// Gauss-Newton alone converges only linearly when the system is
/// over-identified. Without one, Gauss-Newton on a finite-difference
/// Jacobian.
fn gmm_eval<F>(moments: &F, theta: &Vector, w: &Matrix, fd_step: f64) -> Result<Eval>
where
    F: Fn(&Vector, bool) -> Result<MomentEval>,
{
    let m = moments(theta, false)?;
    let wg = w * &m.mean;
    let value = m.mean.dot(&wg);
    match m.jacobian {
        Some(jac) => {
            let grad = jac.transpose() * &wg * 2.0;
            let grad_at = |t: &Vector| -> Result<Vector> {
                let m = moments(t, false)?;
                let jac = m.jacobian.ok_or_else(|| {
                    Error::InvalidConfig("moment Jacobian must be available at every point".into())
                })?;
                Ok(jac.transpose() * (w * &m.mean) * 2.0)
            };
            let h = fd_jacobian(&grad_at, theta, fd_step)?;
            let hess = (&h + h.transpose()) * 0.5;
            Ok((value, grad, hess))
        }
        None => {
            let jac = fd_jacobian(&|t: &Vector| Ok(moments(t, false)?.mean), theta, fd_step)?;
            let grad = jac.transpose() * &wg * 2.0;
            let hess = jac.transpose() * w * &jac * 2.0;
            Ok((value, grad, hess))
        }
    }
}

/// GMM objective `gbar(theta)' W gbar(theta)`.
pub fn gmm_objective<F>(moments: &F, theta: &Vector, w: &Matrix) -> Result<f64>
where
    F: Fn(&Vector, bool) -> Result<MomentEval>,
{
    let m = moments(theta, false)?;
    Ok(m.mean.dot(&(w * &m.mean)))
}

/// Second-step weight: inverse of the outer-product moment covariance,
/// ridge-stabilised with `1e-8 * trace / q`. `None` when not invertible.
pub fn gmm_weight_matrix(contributions: &Matrix) -> Option<Matrix> {
    let n = contributions.nrows() as f64;
    let q = contributions.ncols();
    let mut omega = contributions.transpose() * contributions / n;
    let ridge = 1e-8 * omega.trace() / q as f64;
    for i in 0..q {
        omega[(i, i)] += ridge;
    }
    omega
        .cholesky()
        .map(|c| c.inverse())
        .filter(|w| w.iter().all(|v| v.is_finite()))
}

/// Two-step GMM: identity weight, then the inverse outer-product matrix at
/// the first-step estimate.
pub fn gmm_two_step<F>(moments: F, x0: Vector, cfg: &SolverConfig) -> Result<GmmOutcome>
where
    F: Fn(&Vector, bool) -> Result<MomentEval>,
{
    let q = moments(&x0, false)?.mean.len();
    let identity = Matrix::identity(q, q);
    let first = minimize(|t| gmm_eval(&moments, t, &identity, cfg.fd_step), x0, cfg)?;
    let contributions = moments(&first.x, true)?
        .contributions
        .ok_or_else(|| Error::InvalidConfig("moment function returned no contributions".into()))?;
    let (w, singular_weight) = match gmm_weight_matrix(&contributions) {
        Some(w) => (w, false),
        None => {
            log::warn!("GMM weight matrix is singular; falling back to identity");
            (identity.clone(), true)
        }
    };
    let second = minimize(|t| gmm_eval(&moments, t, &w, cfg.fd_step), first.x.clone(), cfg)?;
    Ok(GmmOutcome {
        theta: second.x,
        objective: second.value,
        weight_matrix: w,
        grad_norm: second.grad_norm,
        iterations: first.iterations + second.iterations,
        converged: second.converged,
        singular_weight,
        failure: second.failure.or(first.failure.filter(|_| !second.converged)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            grad_tol: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            max_iter: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn newton_minimises_rosenbrock() {
        let f = |x: &Vector| -> Result<Eval> {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = Vector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            let h = Matrix::from_row_slice(
                2,
                2,
                &[
                    2.0 - 400.0 * (b - 3.0 * a * a),
                    -400.0 * a,
                    -400.0 * a,
                    200.0,
                ],
            );
            Ok((v, g, h))
        };
        let out = minimize(f, Vector::from_vec(vec![-1.2, 1.0]), &SolverConfig::default()).unwrap();
        assert!(out.converged);
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-8);
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn root_of_nonlinear_system() {
        let f = |x: &Vector| -> Result<Vector> {
            Ok(Vector::from_vec(vec![
                x[0] * x[0] + x[1] * x[1] - 4.0,
                x[0] - x[1].exp() + 1.0,
            ]))
        };
        let out = find_root(f, Vector::from_vec(vec![1.0, 1.0]), &SolverConfig::default()).unwrap();
        assert!(out.converged, "{:?}", out.failure);
        assert!(out.residual_norm <= 1e-8);
    }

    #[test]
    fn fd_jacobian_of_linear_map_is_exact() {
        let a = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let f = |x: &Vector| -> Result<Vector> { Ok(&a * x) };
        let j = fd_jacobian(&f, &Vector::from_vec(vec![0.3, -2.0, 7.0]), 1e-6).unwrap();
        assert_relative_eq!(j, a, epsilon = 1e-8);
    }

    #[test]
    fn gmm_recovers_mean_from_overidentified_moments() {
        // moments: x_i - mu and x_i^2 - mu^2 - 1 for N(mu, 1) data
        let xs: Vec<f64> = (0..400).map(|i| 2.0 + ((i * 37 % 101) as f64 / 101.0 - 0.5) * 3.4).collect();
        let moments = |t: &Vector, want: bool| -> Result<MomentEval> {
            let mu = t[0];
            let c = Matrix::from_fn(xs.len(), 2, |i, j| {
                if j == 0 {
                    xs[i] - mu
                } else {
                    xs[i] * xs[i] - mu * mu - 1.0
                }
            });
            let mean = Vector::from_fn(2, |j, _| c.column(j).mean());
            Ok(MomentEval {
                mean,
                contributions: want.then_some(c),
                jacobian: None,
            })
        };
        let out = gmm_two_step(moments, Vector::from_vec(vec![0.0]), &SolverConfig::default()).unwrap();
        assert!(out.converged);
        let sample_mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((out.theta[0] - sample_mean).abs() < 0.1);
    }
}
