//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Smallest singular value of a square matrix.
pub fn smallest_singular_value(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Solve `m x = b`, refusing when the smallest singular value is below `tol`.
/// On refusal the smallest singular value is returned as the error.
pub fn solve_checked(m: &Matrix, b: &Vector, tol: f64) -> Result<Vector, f64> {
    let sv = smallest_singular_value(m);
    if !(sv > tol) {
        return Err(sv);
    }
    m.clone().lu().solve(b).ok_or(sv)
}

/// Newton direction for a minimisation step. Tries Cholesky on `h`, then on
/// `h + ridge I` with growing ridge; returns `None` when nothing works.
pub fn descent_direction(h: &Matrix, g: &Vector, initial_ridge: f64) -> Option<Vector> {
    let p = h.nrows();
    let scale = (0..p).map(|i| h[(i, i)].abs()).fold(1.0_f64, f64::max);
    let mut ridge = 0.0;
    for _ in 0..24 {
        let mut hm = h.clone();
        if ridge > 0.0 {
            for i in 0..p {
                hm[(i, i)] += ridge;
            }
        }
        if let Some(ch) = hm.cholesky() {
            let d = -ch.solve(g);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        ridge = if ridge == 0.0 {
            initial_ridge * scale
        } else {
            ridge * 10.0
        };
    }
    None
}

/// Symmetric inverse square root via eigendecomposition, flooring
/// eigenvalues at `floor`.
pub fn sym_inv_sqrt(m: &Matrix, floor: f64) -> Matrix {
    let eig = m.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt());
    &eig.eigenvectors * Matrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Induced matrix norm orders supported by the bias diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    One,
    Two,
    Inf,
}

impl NormOrder {
    pub fn vector_norm(self, v: &Vector) -> f64 {
        match self {
            NormOrder::One => v.iter().map(|x| x.abs()).sum(),
            NormOrder::Two => v.norm(),
            NormOrder::Inf => v.amax(),
        }
    }

    /// `max ||M x||_q / ||x||_q`.
    pub fn matrix_norm(self, m: &Matrix) -> f64 {
        match self {
            NormOrder::One => (0..m.ncols())
                .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0, f64::max),
            NormOrder::Inf => (0..m.nrows())
                .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0, f64::max),
            NormOrder::Two => m
                .clone()
                .singular_values()
                .iter()
                .copied()
                .fold(0.0, f64::max),
        }
    }
}

pub fn inf_norm(v: &Vector) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

/// Log-sum-exp with max subtraction; returns `(lse, softmax weights)`.
pub fn log_sum_exp(scores: &Vector) -> (f64, Vector) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w = scores.map(|s| (s - max).exp());
    let total: f64 = w.sum();
    w /= total;
    (max + total.ln(), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn induced_norms_on_known_matrix() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 4.0]);
        assert_relative_eq!(NormOrder::One.matrix_norm(&m), 6.0);
        assert_relative_eq!(NormOrder::Inf.matrix_norm(&m), 7.0);
        // largest singular value of [[1,-2],[3,4]]: sqrt of top eigenvalue of M^T M
        let mtm = m.transpose() * &m;
        let top = mtm.symmetric_eigen().eigenvalues.max().sqrt();
        assert_relative_eq!(NormOrder::Two.matrix_norm(&m), top, epsilon = 1e-12);
    }

    #[test]
    fn inverse_square_root_squares_to_inverse() {
        let m = Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let r = sym_inv_sqrt(&m, 1e-12);
        let inv = m.clone().try_inverse().unwrap();
        assert_relative_eq!(&r * &r, inv, epsilon = 1e-12);
    }

    #[test]
    fn log_sum_exp_survives_large_scores() {
        let s = Vector::from_vec(vec![1000.0, 1000.0]);
        let (lse, w) = log_sum_exp(&s);
        assert_relative_eq!(lse, 1000.0 + 2f64.ln(), epsilon = 1e-9);
        assert_relative_eq!(w[0], 0.5);
    }

    #[test]
    fn solve_checked_rejects_singular() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = Vector::from_vec(vec![1.0, 1.0]);
        assert!(solve_checked(&m, &b, 1e-12).is_err());
    }
}
