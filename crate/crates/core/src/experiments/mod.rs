//! Monte Carlo harness for the simulation designs and bootstrap inference.

mod bootstrap;
mod dgp;
mod output;
mod table;

pub use bootstrap::{att_result, bootstrap, percentile, AttResult};
pub use dgp::generate;
pub use output::{plot_rows, write_plot_csv, write_table_csv, write_table_json, PlotAxis, PlotRow};
pub use table::{fit, run_table, run_table_with_threads, CellSummary, MonteCarloTable, TableMetadata};

use serde::{Deserialize, Serialize};

use crate::correction::CorrectionSpec;
use crate::data::{Method, ReplicatePolicy};
use crate::error::{Error, Result};
use crate::error_model::ErrorModel;
use crate::solver::SolverConfig;

/// True ATT in every built-in design.
pub const TAU0: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// `(X1, U1)` bivariate normal, logistic propensity.
    Bivariate,
    /// Same covariates and outcomes, probit propensity with a milder index.
    BivariateProbit,
    /// `(X1, X2, U1, U2)` equicorrelated normal, logistic propensity.
    FourCovariate,
}

impl Design {
    pub fn label(self) -> &'static str {
        match self {
            Design::Bivariate => "bivariate",
            Design::BivariateProbit => "bivariate_probit",
            Design::FourCovariate => "four_covariate",
        }
    }

    /// Number of error-prone covariates.
    pub fn p1(self) -> usize {
        match self {
            Design::Bivariate | Design::BivariateProbit => 1,
            Design::FourCovariate => 2,
        }
    }

    pub fn p2(self) -> usize {
        self.p1()
    }

    /// Propensity index coefficients on `(X, U)`; under the logistic
    /// designs these are also the EB dual parameter.
    pub fn theta0(self) -> Vec<f64> {
        match self {
            Design::Bivariate => vec![-3.0, 1.5],
            Design::BivariateProbit => vec![-1.0, 0.5],
            Design::FourCovariate => vec![-1.0, 0.5, -0.25, -0.1],
        }
    }

    pub fn intercept(self) -> f64 {
        match self {
            Design::Bivariate => 0.5,
            Design::BivariateProbit => 0.0,
            Design::FourCovariate => 3.5,
        }
    }

    pub fn covariate_law(self) -> &'static str {
        match self {
            Design::Bivariate | Design::BivariateProbit => {
                "normal mean (5, 10), unit variances, covariance 0.3"
            }
            Design::FourCovariate => "normal mean (1, 1, 1, 1), unit variances, pairwise correlation 0.2",
        }
    }
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bivariate" => Ok(Self::Bivariate),
            "bivariate_probit" => Ok(Self::BivariateProbit),
            "four_covariate" => Ok(Self::FourCovariate),
            other => Err(Error::InvalidConfig(format!("unknown design {other:?}"))),
        }
    }
}

/// Distribution of the additive measurement errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    None,
    Normal,
    Uniform,
    /// `Beta(3, 1)` centred and rescaled.
    ModifiedBeta,
    /// `t` with 3 degrees of freedom rescaled.
    ScaledT,
}

impl ErrorKind {
    pub fn label(self) -> &'static str {
        match self {
            ErrorKind::None => "none",
            ErrorKind::Normal => "normal",
            ErrorKind::Uniform => "uniform",
            ErrorKind::ModifiedBeta => "modified_beta",
            ErrorKind::ScaledT => "scaled_t",
        }
    }
}

impl std::str::FromStr for ErrorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "normal" => Ok(Self::Normal),
            "uniform" => Ok(Self::Uniform),
            "modified_beta" => Ok(Self::ModifiedBeta),
            "scaled_t" => Ok(Self::ScaledT),
            other => Err(Error::InvalidConfig(format!("unknown error family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub design: Design,
    pub n: usize,
    pub error_family: ErrorKind,
    pub error_variance: f64,
    /// Replicates per subject.
    pub m: usize,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub replicate_policy: ReplicatePolicy,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl ScenarioSpec {
    pub fn new(design: Design, n: usize, error_family: ErrorKind, error_variance: f64) -> Self {
        Self {
            design,
            n,
            error_family,
            error_variance,
            m: 1,
            reps: 200,
            seed: 1,
            methods: vec![Method::Eb],
            replicate_policy: ReplicatePolicy::First,
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        if self.n < 10 {
            return Err(Error::InvalidConfig("n must be at least 10".into()));
        }
        if !(self.error_variance >= 0.0 && self.error_variance.is_finite()) {
            return Err(Error::InvalidConfig(
                "error_variance must be finite and nonnegative".into(),
            ));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods requested".into()));
        }
        if self.m < 2 {
            if let Some(m) = self.methods.iter().find(|m| m.uses_replicates()) {
                return Err(Error::InvalidConfig(format!(
                    "method {m} needs replicates (m >= 2)"
                )));
            }
        }
        if self.replicate_policy == ReplicatePolicy::Second && self.m < 2 {
            return Err(Error::InvalidConfig(
                "replicate_policy second needs m >= 2".into(),
            ));
        }
        self.solver.validate()
    }

    /// Error variance actually applied (zero for `none`).
    pub fn variance(&self) -> f64 {
        if self.error_family == ErrorKind::None {
            0.0
        } else {
            self.error_variance
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}/{:.2}",
            self.design.label(),
            self.error_family.label(),
            self.variance()
        )
    }

    /// Error model handed to CEB: the true family when its MGF is
    /// implemented (normal, uniform), otherwise the normal approximation.
    pub fn ceb_model(&self) -> Result<ErrorModel> {
        let p1 = self.design.p1();
        let var = self.variance();
        match self.error_family {
            ErrorKind::Uniform => {
                ErrorModel::uniform(crate::linalg::Matrix::identity(p1, p1) * var)
            }
            _ => ErrorModel::isotropic_normal(p1, var),
        }
    }

    /// The true error law when its MGF is available; used for the
    /// large-sample imbalance limits.
    pub fn true_model(&self) -> Option<ErrorModel> {
        match self.error_family {
            ErrorKind::None | ErrorKind::Normal | ErrorKind::Uniform => self.ceb_model().ok(),
            ErrorKind::ModifiedBeta | ErrorKind::ScaledT => None,
        }
    }

    /// Correction settings for `method` in this scenario.
    pub fn correction_spec(&self, method: Method) -> Result<CorrectionSpec> {
        let model = match method {
            Method::Ceb => Some(self.ceb_model()?),
            Method::Bceb | Method::CorrectedCbps => {
                Some(ErrorModel::isotropic_normal(self.design.p1(), self.variance())?)
            }
            _ => None,
        };
        Ok(CorrectionSpec::new(method, model)
            .with_solver(self.solver.clone())
            .with_policy(self.replicate_policy))
    }
}
