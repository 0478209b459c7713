//! Observed-data containers shared by all estimators.
//!
//! A [`Dataset`] holds, per subject, the treatment indicator, an optional
//! outcome, the exactly measured covariates `U` and a ragged list of
//! replicate measurements `X*` of the error-prone covariates. The full
//! covariate vector of a replicate is `Z* = (X*, U)`, so error-prone
//! coordinates always come first.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{smallest_singular_value, Matrix, Vector};

/// Tolerance for the unit-sum constraint of a [`WeightVector`].
pub const WEIGHT_SUM_TOL: f64 = 1e-10;

/// One subject of a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub treated: bool,
    pub outcome: Option<f64>,
    /// Replicate measurements of the error-prone covariates, `m_i >= 1`.
    pub x_star: Vec<Vec<f64>>,
    pub u: Vec<f64>,
}

impl Subject {
    pub fn replicates(&self) -> usize {
        self.x_star.len()
    }

    /// Full covariate vector `(X*_{ij}, U_i)` of replicate `j`.
    pub fn z_star(&self, j: usize) -> Vec<f64> {
        let mut z = self.x_star[j].clone();
        z.extend_from_slice(&self.u);
        z
    }

    pub fn replicate_mean(&self) -> Vec<f64> {
        let m = self.x_star.len() as f64;
        let mut mean = vec![0.0; self.x_star[0].len()];
        for rep in &self.x_star {
            for (acc, v) in mean.iter_mut().zip(rep) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        mean
    }
}

/// One row of the long-format input table (one replicate of one subject).
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub id: String,
    pub treat: f64,
    pub outcome: Option<f64>,
    pub rep: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

/// Which replicate feeds estimators that use one covariate vector per subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicatePolicy {
    #[default]
    First,
    Second,
    Mean,
}

impl FromStr for ReplicatePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Self::First),
            "second" => Ok(Self::Second),
            "mean" => Ok(Self::Mean),
            other => Err(Error::InvalidConfig(format!(
                "replicate_policy must be first, second or mean, got {other:?}"
            ))),
        }
    }
}

/// Validated, immutable observed data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    subjects: Vec<Subject>,
    p1: usize,
    p2: usize,
    intercept: bool,
    treated_idx: Vec<usize>,
    control_idx: Vec<usize>,
}

impl Dataset {
    /// Build a dataset from subjects in row order, checking every invariant.
    pub fn from_subjects(subjects: Vec<Subject>) -> Result<Self> {
        let first = subjects.first().ok_or(Error::EmptyArm {
            n_treated: 0,
            n_control: 0,
        })?;
        let p1 = first.x_star.first().map(Vec::len).unwrap_or(0);
        let p2 = first.u.len();
        let has_outcome = first.outcome.is_some();
        let mut treated_idx = Vec::new();
        let mut control_idx = Vec::new();
        for (i, s) in subjects.iter().enumerate() {
            if s.x_star.is_empty() {
                return Err(Error::DimensionMismatch(format!(
                    "subject {} has no replicate measurements",
                    s.id
                )));
            }
            if let Some(rep) = s.x_star.iter().find(|r| r.len() != p1) {
                return Err(Error::DimensionMismatch(format!(
                    "subject {} has a replicate of dimension {} (expected {p1})",
                    s.id,
                    rep.len()
                )));
            }
            if s.u.len() != p2 {
                return Err(Error::DimensionMismatch(format!(
                    "subject {} has {} exact covariates (expected {p2})",
                    s.id,
                    s.u.len()
                )));
            }
            if s.outcome.is_some() != has_outcome {
                return Err(Error::DimensionMismatch(format!(
                    "outcome present for some subjects but not subject {}",
                    s.id
                )));
            }
            let finite = |field: &str, ok: bool| {
                if ok {
                    Ok(())
                } else {
                    Err(Error::NonFiniteValue {
                        field: field.to_string(),
                        id: s.id.clone(),
                    })
                }
            };
            finite("x", s.x_star.iter().flatten().all(|v| v.is_finite()))?;
            finite("u", s.u.iter().all(|v| v.is_finite()))?;
            finite("outcome", s.outcome.map_or(true, f64::is_finite))?;
            if s.treated {
                treated_idx.push(i);
            } else {
                control_idx.push(i);
            }
        }
        if p1 + p2 == 0 {
            return Err(Error::DimensionMismatch("no covariates".into()));
        }
        if treated_idx.is_empty() || control_idx.is_empty() {
            return Err(Error::EmptyArm {
                n_treated: treated_idx.len(),
                n_control: control_idx.len(),
            });
        }
        Ok(Self {
            subjects,
            p1,
            p2,
            intercept: true,
            treated_idx,
            control_idx,
        })
    }

    /// Whether CBPS-type fits append a constant column (default true).
    pub fn with_intercept(mut self, intercept: bool) -> Self {
        self.intercept = intercept;
        self
    }

    pub fn intercept(&self) -> bool {
        self.intercept
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }
    pub fn n_treated(&self) -> usize {
        self.treated_idx.len()
    }
    pub fn n_control(&self) -> usize {
        self.control_idx.len()
    }
    /// Number of error-prone covariates.
    pub fn p1(&self) -> usize {
        self.p1
    }
    /// Number of exactly measured covariates.
    pub fn p2(&self) -> usize {
        self.p2
    }
    pub fn p(&self) -> usize {
        self.p1 + self.p2
    }
    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }
    pub fn subject(&self, i: usize) -> &Subject {
        &self.subjects[i]
    }
    pub fn treated_indices(&self) -> &[usize] {
        &self.treated_idx
    }
    pub fn control_indices(&self) -> &[usize] {
        &self.control_idx
    }
    pub fn has_outcome(&self) -> bool {
        self.subjects[0].outcome.is_some()
    }
    pub fn replicate_counts(&self) -> Vec<usize> {
        self.subjects.iter().map(Subject::replicates).collect()
    }
    pub fn max_replicates(&self) -> usize {
        self.subjects.iter().map(Subject::replicates).max().unwrap_or(0)
    }

    /// Outcomes, or [`Error::MissingOutcome`].
    pub fn outcomes(&self) -> Result<Vec<f64>> {
        self.subjects
            .iter()
            .map(|s| s.outcome.ok_or(Error::MissingOutcome))
            .collect()
    }

    /// Per-subject covariate vector chosen by `policy`.
    pub fn covariate_row(&self, i: usize, policy: ReplicatePolicy) -> Result<Vec<f64>> {
        let s = &self.subjects[i];
        let mut x = match policy {
            ReplicatePolicy::First => s.x_star[0].clone(),
            ReplicatePolicy::Second => s
                .x_star
                .get(1)
                .cloned()
                .ok_or_else(|| Error::InsufficientReplicates {
                    id: s.id.clone(),
                    have: s.replicates(),
                    needed: 2,
                })?,
            ReplicatePolicy::Mean => s.replicate_mean(),
        };
        x.extend_from_slice(&s.u);
        Ok(x)
    }

    /// `n x p` covariate matrix in row order.
    pub fn covariates(&self, policy: ReplicatePolicy) -> Result<Matrix> {
        let rows = (0..self.n())
            .map(|i| self.covariate_row(i, policy))
            .collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_fn(self.n(), self.p(), |i, j| rows[i][j]))
    }

    /// Copy of this dataset with the given subjects (by row index, repeats
    /// allowed). Used by resampling.
    pub fn resample(&self, rows: &[usize]) -> Result<Dataset> {
        let subjects = rows.iter().map(|&i| self.subjects[i].clone()).collect();
        Ok(Dataset::from_subjects(subjects)?.with_intercept(self.intercept))
    }

    /// Long-format records, one per replicate, in row order.
    pub fn to_records(&self) -> Vec<RawRecord> {
        self.subjects
            .iter()
            .flat_map(|s| {
                s.x_star.iter().enumerate().map(move |(j, x)| RawRecord {
                    id: s.id.clone(),
                    treat: if s.treated { 1.0 } else { 0.0 },
                    outcome: s.outcome,
                    rep: j + 1,
                    x: x.clone(),
                    u: s.u.clone(),
                })
            })
            .collect()
    }
}

/// Assemble and validate a [`Dataset`] from long-format records.
///
/// Subjects appear in order of first occurrence; replicates are ordered by
/// their `rep` index. `u` and `outcome` must be constant within a subject.
pub fn validate(records: &[RawRecord]) -> Result<Dataset> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&RawRecord>> = HashMap::new();
    for r in records {
        if r.treat != 0.0 && r.treat != 1.0 {
            if !r.treat.is_finite() {
                return Err(Error::NonFiniteValue {
                    field: "treat".into(),
                    id: r.id.clone(),
                });
            }
            return Err(Error::NonBinaryTreatment {
                id: r.id.clone(),
                value: r.treat,
            });
        }
        if r.rep == 0 {
            return Err(Error::DimensionMismatch(format!(
                "subject {}: replicate index must be >= 1",
                r.id
            )));
        }
        groups
            .entry(r.id.clone())
            .or_insert_with(|| {
                order.push(r.id.clone());
                Vec::new()
            })
            .push(r);
    }
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by_key(|r| r.rep);
        let head = rows[0];
        for pair in rows.windows(2) {
            if pair[0].rep == pair[1].rep {
                return Err(Error::DimensionMismatch(format!(
                    "subject {id}: duplicate replicate index {}",
                    pair[0].rep
                )));
            }
        }
        for r in &rows[1..] {
            if r.treat != head.treat {
                return Err(Error::DimensionMismatch(format!(
                    "subject {id}: treatment differs across replicates"
                )));
            }
            if r.u != head.u || r.outcome != head.outcome {
                let field = if r.u != head.u { "u" } else { "outcome" };
                // NaN != NaN lands here too; report it as non-finite.
                if r.u.iter().chain(&r.outcome).any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteValue {
                        field: field.into(),
                        id,
                    });
                }
                return Err(Error::DimensionMismatch(format!(
                    "subject {id}: {field} must be constant across replicates"
                )));
            }
        }
        subjects.push(Subject {
            id,
            treated: head.treat == 1.0,
            outcome: head.outcome,
            x_star: rows.iter().map(|r| r.x.clone()).collect(),
            u: head.u.clone(),
        });
    }
    Dataset::from_subjects(subjects)
}

/// Normalised, nonnegative weights over the control subjects, aligned to
/// their row indices in the originating dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    control_rows: Vec<usize>,
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(control_rows: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if control_rows.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} control subjects",
                weights.len(),
                control_rows.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidWeights(format!(
                "weight {w} is negative or non-finite"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeights(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(Self {
            control_rows,
            weights,
        })
    }

    /// Normalise nonnegative raw weights to unit sum.
    pub fn from_unnormalized(control_rows: Vec<usize>, raw: Vec<f64>) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidWeights(format!(
                "cannot normalise weights with total {total}"
            )));
        }
        let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        // Absorb the rounding residue so the sum is 1 to machine precision.
        let residue = 1.0 - weights.iter().sum::<f64>();
        if let Some(max) = weights
            .iter_mut()
            .max_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
        {
            *max += residue;
        }
        Self::new(control_rows, weights)
    }

    pub fn uniform(control_rows: Vec<usize>) -> Result<Self> {
        let k = control_rows.len();
        Self::from_unnormalized(control_rows, vec![1.0; k])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn control_rows(&self) -> &[usize] {
        &self.control_rows
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Estimator label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Eb,
    Cbps,
    Ceb,
    Bceb,
    CebHl,
    CebHw,
    CorrectedCbps,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Eb,
        Method::Cbps,
        Method::Ceb,
        Method::Bceb,
        Method::CebHl,
        Method::CebHw,
        Method::CorrectedCbps,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Eb => "eb",
            Method::Cbps => "cbps",
            Method::Ceb => "ceb",
            Method::Bceb => "bceb",
            Method::CebHl => "ceb_hl",
            Method::CebHw => "ceb_hw",
            Method::CorrectedCbps => "corrected_cbps",
        }
    }

    /// Methods driven by replicate measurements instead of an error model.
    pub fn uses_replicates(self) -> bool {
        matches!(self, Method::CebHl | Method::CebHw)
    }

    /// Methods that need an [`crate::error_model::ErrorModel`].
    pub fn needs_error_model(self) -> bool {
        matches!(self, Method::Ceb | Method::Bceb | Method::CorrectedCbps)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// Result of fitting a balancing estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceFit {
    pub theta: Vec<f64>,
    pub weights: WeightVector,
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl BalanceFit {
    pub fn theta_vector(&self) -> Vector {
        Vector::from_column_slice(&self.theta)
    }
}

/// Treated-group sample moments of the covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatedMoments {
    pub mean: Vector,
    /// Per-coordinate SD with divisor `n1 - 1`.
    pub sd: Vector,
    /// Covariance with divisor `n1 - 1`.
    pub cov: Matrix,
    /// Smallest singular value of `cov` is below 1e-12.
    pub singular: bool,
}

/// Singular-value threshold below which the treated covariance is flagged.
pub const SINGULAR_COV_TOL: f64 = 1e-12;

/// Mean, SD and covariance of the covariates among treated subjects.
pub fn treated_moments(data: &Dataset, policy: ReplicatePolicy) -> Result<TreatedMoments> {
    let z = data.covariates(policy)?;
    treated_moments_of(&z, data.treated_indices())
}

/// Same as [`treated_moments`] for an explicit `n x p` covariate matrix.
pub fn treated_moments_of(z: &Matrix, treated: &[usize]) -> Result<TreatedMoments> {
    let n1 = treated.len();
    if n1 < 2 {
        return Err(Error::TooFewTreated {
            needed: 2,
            have: n1,
        });
    }
    let p = z.ncols();
    let mut mean = Vector::zeros(p);
    for &i in treated {
        mean += z.row(i).transpose();
    }
    mean /= n1 as f64;
    let mut cov = Matrix::zeros(p, p);
    for &i in treated {
        let d = z.row(i).transpose() - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n1 - 1) as f64;
    let sd = Vector::from_fn(p, |j, _| cov[(j, j)].sqrt());
    let singular = smallest_singular_value(&cov) < SINGULAR_COV_TOL;
    Ok(TreatedMoments {
        mean,
        sd,
        cov,
        singular,
    })
}
