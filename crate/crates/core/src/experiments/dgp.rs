use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal, StudentT};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{Design, ErrorKind, ScenarioSpec};
use crate::data::{Dataset, Subject};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Per-rep random stream: counter-based on `(seed, rep_index)`.
pub(crate) fn rep_rng(seed: u64, rep_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep_index);
    rng
}

fn covariance(design: Design) -> (Vec<f64>, Matrix) {
    match design {
        Design::Bivariate | Design::BivariateProbit => (
            vec![5.0, 10.0],
            Matrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]),
        ),
        Design::FourCovariate => (
            vec![1.0; 4],
            Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.2 }),
        ),
    }
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct ErrorSampler {
    kind: ErrorKind,
    var: f64,
    beta: Beta<f64>,
    t3: StudentT<f64>,
}

impl ErrorSampler {
    fn new(kind: ErrorKind, var: f64) -> Self {
        Self {
            kind,
            var,
            beta: Beta::new(3.0, 1.0).expect("valid beta parameters"),
            t3: StudentT::new(3.0).expect("valid t parameters"),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        let v = self.var;
        match self.kind {
            ErrorKind::None => 0.0,
            ErrorKind::Normal => v.sqrt() * rng.sample::<f64, _>(StandardNormal),
            ErrorKind::Uniform => {
                let a = (3.0 * v).sqrt();
                if a == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-a..a)
                }
            }
            // Beta(3, 1) has mean 3/4 and variance 3/80
            ErrorKind::ModifiedBeta => (self.beta.sample(rng) - 0.75) * (v / (3.0 / 80.0)).sqrt(),
            // t_3 has variance 3
            ErrorKind::ScaledT => self.t3.sample(rng) * (v / 3.0).sqrt(),
        }
    }
}

/// Draw rep `rep_index` of the scenario: the dataset of true covariates
/// (one exact replicate) and the observed dataset with `m` noisy replicates
/// of the error-prone covariates. Both share subjects, arms and outcomes.
pub fn generate(spec: &ScenarioSpec, rep_index: usize) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let design = spec.design;
    let (mean, cov) = covariance(design);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("covariate covariance not positive definite".into()))?
        .l();
    let p = mean.len();
    let p1 = design.p1();
    let theta0 = design.theta0();
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let errors = ErrorSampler::new(spec.error_family, spec.variance());
    let mut rng = rep_rng(spec.seed, rep_index as u64);

    let mut truth = Vec::with_capacity(spec.n);
    let mut observed = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let e: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let z: Vec<f64> = (0..p)
            .map(|a| mean[a] + (0..=a).map(|b| chol[(a, b)] * e[b]).sum::<f64>())
            .collect();
        let index = design.intercept() + z.iter().zip(&theta0).map(|(a, b)| a * b).sum::<f64>();
        let prob = match design {
            Design::BivariateProbit => std_normal.cdf(index),
            _ => expit(index),
        };
        let treated = rng.gen::<f64>() < prob;
        let signal: f64 = match design {
            Design::Bivariate | Design::BivariateProbit => 27.4 * z[0] + 13.7 * z[1],
            Design::FourCovariate => 27.4 * z[0] + 13.7 * (z[1] + z[2] + z[3]),
        };
        let y1 = 220.0 + signal + 2.0 * rng.sample::<f64, _>(StandardNormal);
        let y0 = 210.0 + signal + 2.0 * rng.sample::<f64, _>(StandardNormal);
        let y = if treated { y1 } else { y0 };
        let x = z[..p1].to_vec();
        let u = z[p1..].to_vec();
        let reps = (0..spec.m)
            .map(|_| x.iter().map(|v| v + errors.draw(&mut rng)).collect())
            .collect();
        let id = format!("{}", i + 1);
        truth.push(Subject {
            id: id.clone(),
            treated,
            outcome: Some(y),
            x_star: vec![x],
            u: u.clone(),
        });
        observed.push(Subject {
            id,
            treated,
            outcome: Some(y),
            x_star: reps,
            u,
        });
    }
    Ok((Dataset::from_subjects(truth)?, Dataset::from_subjects(observed)?))
}
