//! Measurement-error distribution: moment generating function and its
//! derivatives, plus replicate-based estimates of the error variance and of
//! `eta_0(theta) = E exp(theta' eps)`.
//!
//! Errors are additive on the first `p1` coordinates of `Z*`; the exact
//! coordinates carry no error, so every gradient returned here has zeros
//! in its trailing `p - p1` entries.

use std::fmt;
use std::sync::Arc;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Largest exponent accepted before reporting [`Error::NonFiniteExp`].
pub const MAX_EXPONENT: f64 = 700.0;

const SYMMETRY_TOL: f64 = 1e-10;

/// User-supplied MGF of the error-prone block, evaluated at `theta_x`.
/// Returning `None` signals divergence at that parameter.
pub trait CustomMgf: Send + Sync + fmt::Debug {
    fn value(&self, theta_x: &Vector) -> Option<f64>;
    fn gradient(&self, theta_x: &Vector) -> Option<Vector>;
    fn hessian(&self, theta_x: &Vector) -> Option<Matrix>;
}

#[derive(Debug, Clone)]
pub enum ErrorFamily {
    Normal,
    /// Independent coordinates, uniform on `[-a_j, a_j]` with `a_j = sqrt(3 Sigma1[j,j])`.
    UniformSymmetric,
    Custom(Arc<dyn CustomMgf>),
}

impl ErrorFamily {
    pub fn label(&self) -> &'static str {
        match self {
            ErrorFamily::Normal => "normal",
            ErrorFamily::UniformSymmetric => "uniform_symmetric",
            ErrorFamily::Custom(_) => "custom",
        }
    }

    pub fn is_symmetric(&self) -> bool {
        !matches!(self, ErrorFamily::Custom(_))
    }
}

/// `M(theta)` with gradient and Hessian in the full `p`-dimensional space.
#[derive(Debug, Clone, PartialEq)]
pub struct MgfEval {
    pub value: f64,
    pub grad: Vector,
    pub hess: Matrix,
}

#[derive(Debug, Clone)]
pub struct ErrorModel {
    sigma1: Matrix,
    family: ErrorFamily,
}

impl ErrorModel {
    fn checked(sigma1: Matrix, family: ErrorFamily) -> Result<Self> {
        let p1 = sigma1.nrows();
        if sigma1.ncols() != p1 {
            return Err(Error::InvalidErrorModel("sigma1 must be square".into()));
        }
        if sigma1.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidErrorModel("sigma1 has non-finite entries".into()));
        }
        for i in 0..p1 {
            for j in 0..i {
                if (sigma1[(i, j)] - sigma1[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidErrorModel("sigma1 is not symmetric".into()));
                }
            }
        }
        if p1 > 0 {
            let scale = sigma1.amax().max(1.0);
            let min_eig = sigma1.clone().symmetric_eigen().eigenvalues.min();
            if min_eig < -1e-12 * scale {
                return Err(Error::InvalidErrorModel(format!(
                    "sigma1 has negative eigenvalue {min_eig}"
                )));
            }
        }
        if matches!(family, ErrorFamily::UniformSymmetric) {
            let off = (0..p1)
                .flat_map(|i| (0..p1).filter(move |&j| j != i).map(move |j| (i, j)))
                .any(|ij| sigma1[ij] != 0.0);
            if off {
                return Err(Error::InvalidErrorModel(
                    "uniform errors are independent per coordinate; sigma1 must be diagonal".into(),
                ));
            }
        }
        Ok(Self { sigma1, family })
    }

    pub fn normal(sigma1: Matrix) -> Result<Self> {
        Self::checked(sigma1, ErrorFamily::Normal)
    }

    pub fn uniform(sigma1: Matrix) -> Result<Self> {
        Self::checked(sigma1, ErrorFamily::UniformSymmetric)
    }

    pub fn custom(sigma1: Matrix, mgf: Arc<dyn CustomMgf>) -> Result<Self> {
        Self::checked(sigma1, ErrorFamily::Custom(mgf))
    }

    /// Normal model with `Sigma1 = variance * I`.
    pub fn isotropic_normal(p1: usize, variance: f64) -> Result<Self> {
        Self::normal(Matrix::identity(p1, p1) * variance)
    }

    /// Same variance matrix, normal family. Used where an estimator is
    /// derived under normality regardless of the supplied family.
    pub fn as_normal(&self) -> ErrorModel {
        ErrorModel {
            sigma1: self.sigma1.clone(),
            family: ErrorFamily::Normal,
        }
    }

    pub fn p1(&self) -> usize {
        self.sigma1.nrows()
    }

    pub fn sigma1(&self) -> &Matrix {
        &self.sigma1
    }

    pub fn family(&self) -> &ErrorFamily {
        &self.family
    }

    /// `Sigma = diag(Sigma1, 0)` as a `p x p` matrix.
    pub fn full_sigma(&self, p: usize) -> Matrix {
        let p1 = self.p1();
        let mut s = Matrix::zeros(p, p);
        s.view_mut((0, 0), (p1, p1)).copy_from(&self.sigma1);
        s
    }

    fn split(&self, theta: &Vector) -> Result<Vector> {
        if theta.len() < self.p1() {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} entries, error model needs at least {}",
                theta.len(),
                self.p1()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::MgfUndefined);
        }
        Ok(theta.rows(0, self.p1()).into_owned())
    }

    /// `log M(theta)` with gradient and Hessian, embedded in `theta.len()`
    /// dimensions. Computed without exponentiating, so it never overflows
    /// for the normal and uniform families.
    pub fn log_mgf(&self, theta: &Vector) -> Result<MgfEval> {
        let p = theta.len();
        let p1 = self.p1();
        let tx = self.split(theta)?;
        let (value, gx, hx) = match &self.family {
            ErrorFamily::Normal => {
                let st = &self.sigma1 * &tx;
                (0.5 * tx.dot(&st), st, self.sigma1.clone())
            }
            ErrorFamily::UniformSymmetric => {
                let mut value = 0.0;
                let mut g = Vector::zeros(p1);
                let mut h = Matrix::zeros(p1, p1);
                for j in 0..p1 {
                    let a = (3.0 * self.sigma1[(j, j)]).sqrt();
                    let s = a * tx[j];
                    value += log_sinhc(s);
                    g[j] = a * langevin(s);
                    h[(j, j)] = a * a * langevin_deriv(s);
                }
                (value, g, h)
            }
            ErrorFamily::Custom(f) => {
                let m = f.value(&tx).ok_or(Error::MgfUndefined)?;
                let gm = f.gradient(&tx).ok_or(Error::MgfUndefined)?;
                let hm = f.hessian(&tx).ok_or(Error::MgfUndefined)?;
                if !(m > 0.0 && m.is_finite()) || gm.len() != p1 || hm.shape() != (p1, p1) {
                    return Err(Error::MgfUndefined);
                }
                let g = &gm / m;
                let h = &hm / m - &g * g.transpose();
                (m.ln(), g, h)
            }
        };
        if !value.is_finite() {
            return Err(Error::MgfUndefined);
        }
        let mut grad = Vector::zeros(p);
        grad.rows_mut(0, p1).copy_from(&gx);
        let mut hess = Matrix::zeros(p, p);
        hess.view_mut((0, 0), (p1, p1)).copy_from(&hx);
        Ok(MgfEval {
            value,
            grad,
            hess,
        })
    }

    /// `M(theta) = E exp(theta' eps)` with gradient and Hessian.
    pub fn mgf(&self, theta: &Vector) -> Result<MgfEval> {
        if let ErrorFamily::Custom(f) = &self.family {
            let p = theta.len();
            let p1 = self.p1();
            let tx = self.split(theta)?;
            let m = f.value(&tx).ok_or(Error::MgfUndefined)?;
            if !m.is_finite() || m <= 0.0 {
                return Err(Error::MgfUndefined);
            }
            let gm = f.gradient(&tx).ok_or(Error::MgfUndefined)?;
            let hm = f.hessian(&tx).ok_or(Error::MgfUndefined)?;
            let mut grad = Vector::zeros(p);
            grad.rows_mut(0, p1).copy_from(&gm);
            let mut hess = Matrix::zeros(p, p);
            hess.view_mut((0, 0), (p1, p1)).copy_from(&hm);
            return Ok(MgfEval {
                value: m,
                grad,
                hess,
            });
        }
        let log = self.log_mgf(theta)?;
        if log.value.abs() > MAX_EXPONENT {
            return Err(Error::NonFiniteExp {
                exponent: log.value,
                subject: None,
            });
        }
        let m = log.value.exp();
        let grad = &log.grad * m;
        let hess = (&log.hess + &log.grad * log.grad.transpose()) * m;
        Ok(MgfEval {
            value: m,
            grad,
            hess,
        })
    }
}

/// `ln(sinh(s) / s)`.
fn log_sinhc(s: f64) -> f64 {
    let a = s.abs();
    if a < 1e-2 {
        let s2 = s * s;
        s2 / 6.0 - s2 * s2 / 180.0 + s2 * s2 * s2 / 2835.0
    } else {
        a + (-(-2.0 * a).exp()).ln_1p() - std::f64::consts::LN_2 - a.ln()
    }
}

/// Langevin function `coth(s) - 1/s`, the derivative of [`log_sinhc`].
fn langevin(s: f64) -> f64 {
    if s.abs() < 1e-2 {
        let s2 = s * s;
        s / 3.0 - s * s2 / 45.0 + 2.0 * s * s2 * s2 / 945.0
    } else {
        1.0 / s.tanh() - 1.0 / s
    }
}

/// `1/s^2 - 1/sinh(s)^2`.
fn langevin_deriv(s: f64) -> f64 {
    let a = s.abs();
    if a < 1e-2 {
        let s2 = s * s;
        1.0 / 3.0 - s2 / 15.0 + 2.0 * s2 * s2 / 189.0
    } else if a > 350.0 {
        1.0 / (s * s)
    } else {
        let sh = s.sinh();
        1.0 / (s * s) - 1.0 / (sh * sh)
    }
}

/// Replicate-based estimate of `Sigma`:
/// `sum_i sum_j (Z*_ij - mean_i)(Z*_ij - mean_i)' / sum_i (m_i - 1)`,
/// with the exact-covariate rows and columns set to zero.
pub fn estimate_sigma(data: &Dataset) -> Result<Matrix> {
    let p = data.p();
    let p1 = data.p1();
    let dof: usize = data.subjects().iter().map(|s| s.replicates() - 1).sum();
    if dof == 0 {
        return Err(Error::NoReplicates);
    }
    let mut s1 = Matrix::zeros(p1, p1);
    for subj in data.subjects().iter().filter(|s| s.replicates() > 1) {
        let mean = Vector::from_vec(subj.replicate_mean());
        for rep in &subj.x_star {
            let d = Vector::from_column_slice(rep) - &mean;
            s1 += &d * d.transpose();
        }
    }
    s1 /= dof as f64;
    // exact symmetry
    let s1 = (&s1 + s1.transpose()) * 0.5;
    let mut sigma = Matrix::zeros(p, p);
    sigma.view_mut((0, 0), (p1, p1)).copy_from(&s1);
    Ok(sigma)
}

/// Pairwise-difference estimate of `eta_0(theta)` and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaEstimate {
    pub eta0: f64,
    pub eta1: Vector,
}

/// `eta0_hat(theta)^2` is the average, over subjects with `m_i > 1`, of the
/// mean of `exp(theta'(Z*_ij - Z*_ik))` over ordered pairs `j != k`;
/// `eta1_hat` is its analytic gradient.
pub fn eta0_hat(theta: &Vector, data: &Dataset) -> Result<EtaEstimate> {
    let p = data.p();
    let p1 = data.p1();
    if theta.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "theta has {} entries, data has {p} covariates",
            theta.len()
        )));
    }
    let tx = theta.rows(0, p1);
    let mut n_xi = 0usize;
    let mut sq = 0.0;
    let mut grad_sq = Vector::zeros(p1);
    let mut scores = Vec::new();
    for subj in data.subjects().iter().filter(|s| s.replicates() > 1) {
        n_xi += 1;
        let m = subj.replicates();
        scores.clear();
        scores.extend(
            subj.x_star
                .iter()
                .map(|x| x.iter().zip(tx.iter()).map(|(a, b)| a * b).sum::<f64>()),
        );
        let norm = 1.0 / (m * (m - 1)) as f64;
        for j in 0..m {
            for k in 0..m {
                if j == k {
                    continue;
                }
                let expo = scores[j] - scores[k];
                if expo.abs() > MAX_EXPONENT {
                    return Err(Error::NonFiniteExp {
                        exponent: expo,
                        subject: Some(subj.id.clone()),
                    });
                }
                let e = expo.exp() * norm;
                sq += e;
                for c in 0..p1 {
                    grad_sq[c] += e * (subj.x_star[j][c] - subj.x_star[k][c]);
                }
            }
        }
    }
    if n_xi == 0 {
        return Err(Error::NoReplicates);
    }
    sq /= n_xi as f64;
    grad_sq /= n_xi as f64;
    let eta0 = sq.sqrt();
    let mut eta1 = Vector::zeros(p);
    eta1.rows_mut(0, p1).copy_from(&(grad_sq / (2.0 * eta0)));
    Ok(EtaEstimate { eta0, eta1 })
}
