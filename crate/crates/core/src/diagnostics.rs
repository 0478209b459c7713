//! Imbalance measures, their large-sample limits under measurement error,
//! and predictions of the naive EB bias.

use serde::{Deserialize, Serialize};

use crate::balance::{check_dim, EbDual};
use crate::correction::{ceb_objective, solve_ceb, CorrectionSpec};
use crate::data::{treated_moments_of, Dataset, Method, ReplicatePolicy, WeightVector};
use crate::error::{Error, Result};
use crate::error_model::ErrorModel;
use crate::linalg::{solve_checked, sym_inv_sqrt, Matrix, NormOrder, Vector};

/// Flag set when the treated covariance cannot be inverted for MD.
pub const SINGULAR_TREATED_COVARIANCE: &str = "singular_treated_covariance";
/// Flag set when some treated SD is zero and its ASMD is omitted.
pub const ZERO_TREATED_SD: &str = "zero_treated_sd";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    TrueCovariates,
    #[default]
    ObservedCovariates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    /// Per-coordinate ASMD; `None` where the treated SD is zero.
    pub asmd: Vec<Option<f64>>,
    /// `None` when the treated covariance is singular.
    pub md: Option<f64>,
    pub basis: Basis,
    pub weights_source: Option<Method>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl ImbalanceReport {
    pub fn with_labels(mut self, basis: Basis, source: Method) -> Self {
        self.basis = basis;
        self.weights_source = Some(source);
        self
    }

    /// Largest available ASMD.
    pub fn max_asmd(&self) -> f64 {
        self.asmd.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// ASMD and MD of weighted controls against treated subjects on an
/// `n x p` covariate matrix aligned with `data`'s rows.
pub fn imbalance(weights: &WeightVector, covariates: &Matrix, data: &Dataset) -> Result<ImbalanceReport> {
    if covariates.nrows() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "covariate matrix has {} rows, data has {} subjects",
            covariates.nrows(),
            data.n()
        )));
    }
    if weights.control_rows() != data.control_indices() {
        return Err(Error::DimensionMismatch(
            "weights are not aligned with the dataset's control subjects".into(),
        ));
    }
    let moments = treated_moments_of(covariates, data.treated_indices())?;
    let p = covariates.ncols();
    let mut d = moments.mean.clone();
    for (&i, w) in weights.control_rows().iter().zip(weights.weights()) {
        for j in 0..p {
            d[j] -= w * covariates[(i, j)];
        }
    }
    let mut flags = Vec::new();
    let asmd = (0..p)
        .map(|j| {
            let sd = moments.sd[j];
            if sd > 0.0 {
                Some(d[j].abs() / sd)
            } else {
                None
            }
        })
        .collect::<Vec<_>>();
    if asmd.iter().any(Option::is_none) {
        flags.push(ZERO_TREATED_SD.to_string());
    }
    let md = if moments.singular {
        flags.push(SINGULAR_TREATED_COVARIANCE.to_string());
        None
    } else {
        moments
            .cov
            .clone()
            .cholesky()
            .map(|c| d.dot(&c.solve(&d)).max(0.0).sqrt())
    };
    if md.is_none() && !flags.iter().any(|f| f == SINGULAR_TREATED_COVARIANCE) {
        flags.push(SINGULAR_TREATED_COVARIANCE.to_string());
    }
    Ok(ImbalanceReport {
        asmd,
        md,
        basis: Basis::default(),
        weights_source: None,
        flags,
    })
}

/// Large-sample imbalance of naive weights on the true covariates:
/// `|[grad log M(theta*)]_j| / sd_j` for error-prone coordinates (zero for
/// exact ones) and `||cov^{-1/2} grad log M(theta*)||_2`.
pub fn asymptotic_imbalance(
    theta_star: &Vector,
    model: &ErrorModel,
    treated_sd: &Vector,
    treated_cov: &Matrix,
) -> Result<(Vector, f64)> {
    let p = theta_star.len();
    if treated_sd.len() != p || treated_cov.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "theta has {p} entries but treated moments are {} / {:?}",
            treated_sd.len(),
            treated_cov.shape()
        )));
    }
    let g = model.log_mgf(theta_star)?.grad;
    let asmd = Vector::from_fn(p, |j, _| {
        if j < model.p1() {
            g[j].abs() / treated_sd[j]
        } else {
            0.0
        }
    });
    let md = (sym_inv_sqrt(treated_cov, 1e-12) * &g).norm();
    Ok((asmd, md))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPrediction {
    pub theta0: Vec<f64>,
    /// `theta* - theta0`.
    pub bias: Vec<f64>,
    /// Max deviation between `theta*` and its recomputation from the
    /// block-partitioned form of the bias formula.
    pub block_residual: f64,
}

/// Invert the normal-error bias formula:
/// `theta0 = H^-1 (H + Sigma) theta*` with `H` the supplied Hessian estimate.
pub fn predict_naive_bias(
    theta_star: &Vector,
    model: &ErrorModel,
    hessian_hat: &Matrix,
) -> Result<BiasPrediction> {
    let p = theta_star.len();
    let p1 = model.p1();
    if hessian_hat.shape() != (p, p) || p1 > p {
        return Err(Error::DimensionMismatch(format!(
            "Hessian is {:?}, theta has {p} entries",
            hessian_hat.shape()
        )));
    }
    let sigma = model.as_normal().full_sigma(p);
    let singular = |sv: f64| Error::SingularCorrection {
        smallest_singular_value: sv,
    };
    let theta0 = solve_checked(hessian_hat, &((hessian_hat + &sigma) * theta_star), 1e-12)
        .map_err(singular)?;

    // block form: theta*_x = (I + Hi11 S1)^-1 theta0_x,
    // theta*_u = theta0_u - Hi21 S1 (I + Hi11 S1)^-1 theta0_x
    let hinv = hessian_hat
        .clone()
        .try_inverse()
        .ok_or(Error::SingularCorrection {
            smallest_singular_value: 0.0,
        })?;
    let s1 = model.sigma1();
    let hi11 = hinv.view((0, 0), (p1, p1)).into_owned();
    let hi21 = hinv.view((p1, 0), (p - p1, p1)).into_owned();
    let a = Matrix::identity(p1, p1) + &hi11 * s1;
    let t0x = theta0.rows(0, p1).into_owned();
    let star_x = solve_checked(&a, &t0x, 1e-14).map_err(singular)?;
    let star_u = theta0.rows(p1, p - p1) - &hi21 * s1 * &star_x;
    let mut block = Vector::zeros(p);
    block.rows_mut(0, p1).copy_from(&star_x);
    block.rows_mut(p1, p - p1).copy_from(&star_u);
    let block_residual = (block - theta_star).amax();

    let bias = theta_star - &theta0;
    Ok(BiasPrediction {
        theta0: theta0.iter().copied().collect(),
        bias: bias.iter().copied().collect(),
        block_residual,
    })
}

/// Empirical version of the bias lower bound
/// `||grad log M(theta*)||_q / sup ||H(theta)||_q` with the sup over
/// `samples` evenly spaced points of the segment from `endpoint` to
/// `theta*`. `H` is the corrected Hessian `Hess L(.; O1*) - Hess log M`.
/// When `endpoint` is `None` the CEB estimate is used. This is a diagnostic
/// estimate: both `H` and the segment are estimated.
pub fn bias_lower_bound(
    theta_star: &Vector,
    endpoint: Option<&Vector>,
    samples: usize,
    model: &ErrorModel,
    data: &Dataset,
    policy: ReplicatePolicy,
    q: NormOrder,
) -> Result<f64> {
    let dual = EbDual::new(data, policy)?;
    check_dim(theta_star, dual.dim())?;
    let numerator = q.vector_norm(&model.log_mgf(theta_star)?.grad);
    if numerator == 0.0 {
        return Ok(0.0);
    }
    let end = match endpoint {
        Some(e) => {
            check_dim(e, dual.dim())?;
            e.clone()
        }
        None => {
            let spec = CorrectionSpec::new(Method::Ceb, Some(model.clone())).with_policy(policy);
            solve_ceb(data, &spec)?.theta_vector()
        }
    };
    let samples = samples.max(2);
    let mut sup: f64 = 0.0;
    for k in 0..samples {
        let t = k as f64 / (samples - 1) as f64;
        let point = &end * (1.0 - t) + theta_star * t;
        let (_, _, h) = ceb_objective(&point, &dual, model)?;
        sup = sup.max(q.matrix_norm(&h));
    }
    if !(sup > 0.0) {
        return Err(Error::SingularCorrection {
            smallest_singular_value: 0.0,
        });
    }
    Ok(numerator / sup)
}
