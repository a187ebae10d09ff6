//! Dense linear algebra on top of `nalgebra`, plus the Cholesky factor type
//! used to parametrize every Gaussian in the crate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is not symmetric (entry ({row}, {col}) differs by {diff})")]
    NotSymmetric { row: usize, col: usize, diff: f64 },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("lower-triangular factor is invalid: {0}")]
    InvalidFactor(String),
}

/// Lower-triangular `L` with strictly positive diagonal, `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: Matrix,
}

impl CholeskyFactor {
    /// Factorizes a symmetric positive definite matrix.
    ///
    /// Symmetry is checked to 1e-10 relative to the largest entry.
    pub fn decompose(a: &Matrix) -> Result<Self, LinalgError> {
        let (rows, cols) = a.shape();
        if rows != cols || rows == 0 {
            return Err(LinalgError::NotSquare { rows, cols });
        }
        let scale = a.amax().max(f64::MIN_POSITIVE);
        for i in 0..rows {
            for j in 0..i {
                let diff = (a[(i, j)] - a[(j, i)]).abs();
                if diff > 1e-10 * scale {
                    return Err(LinalgError::NotSymmetric { row: i, col: j, diff });
                }
            }
        }
        match nalgebra::linalg::Cholesky::new(a.clone()) {
            Some(c) => {
                let l = c.unpack();
                if let Some(k) = (0..rows).find(|&k| !(l[(k, k)] > 0.0) || !l[(k, k)].is_finite()) {
                    return Err(LinalgError::NotPositiveDefinite { pivot: k, value: l[(k, k)] });
                }
                Ok(Self { l })
            }
            None => Err(first_bad_pivot(a)),
        }
    }

    /// Wraps an existing lower-triangular matrix, validating the invariants.
    pub fn from_lower(l: Matrix) -> Result<Self, LinalgError> {
        let (rows, cols) = l.shape();
        if rows != cols || rows == 0 {
            return Err(LinalgError::NotSquare { rows, cols });
        }
        for i in 0..rows {
            if !(l[(i, i)] > 0.0) || !l[(i, i)].is_finite() {
                return Err(LinalgError::InvalidFactor(format!(
                    "diagonal entry {i} is {}",
                    l[(i, i)]
                )));
            }
            for j in 0..rows {
                if j > i && l[(i, j)] != 0.0 {
                    return Err(LinalgError::InvalidFactor(format!(
                        "upper entry ({i}, {j}) is nonzero"
                    )));
                }
                if !l[(i, j)].is_finite() {
                    return Err(LinalgError::InvalidFactor(format!(
                        "entry ({i}, {j}) is not finite"
                    )));
                }
            }
        }
        Ok(Self { l })
    }

    pub fn identity(d: usize) -> Self {
        Self { l: Matrix::identity(d, d) }
    }

    /// `sqrt(v)·I`.
    pub fn scaled_identity(d: usize, variance: f64) -> Result<Self, LinalgError> {
        Self::from_lower(Matrix::identity(d, d) * variance.sqrt())
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn into_lower(self) -> Matrix {
        self.l
    }

    /// `L z`.
    pub fn mul_vec(&self, z: &Vector) -> Vector {
        let n = self.dim();
        let mut out = Vector::zeros(n);
        for j in 0..n {
            let zj = z[j];
            if zj == 0.0 {
                continue;
            }
            for i in j..n {
                out[i] += self.l[(i, j)] * zj;
            }
        }
        out
    }

    /// `Lᵀ v`.
    pub fn mul_t_vec(&self, v: &Vector) -> Vector {
        let n = self.dim();
        let mut out = Vector::zeros(n);
        for j in 0..n {
            let mut s = 0.0;
            for i in j..n {
                s += self.l[(i, j)] * v[i];
            }
            out[j] = s;
        }
        out
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &Vector) -> Vector {
        let n = self.dim();
        let mut x = b.clone();
        for j in 0..n {
            x[j] /= self.l[(j, j)];
            let xj = x[j];
            for i in (j + 1)..n {
                x[i] -= self.l[(i, j)] * xj;
            }
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_lower_t(&self, b: &Vector) -> Vector {
        let n = self.dim();
        let mut x = b.clone();
        for j in (0..n).rev() {
            let mut s = x[j];
            for i in (j + 1)..n {
                s -= self.l[(i, j)] * x[i];
            }
            x[j] = s / self.l[(j, j)];
        }
        x
    }

    /// Solves `L Lᵀ x = b`.
    pub fn solve(&self, b: &Vector) -> Vector {
        self.solve_lower_t(&self.solve_lower(b))
    }

    /// `Σ log Lₖₖ`, i.e. half the log-determinant of `L Lᵀ`.
    pub fn half_log_det(&self) -> f64 {
        (0..self.dim()).map(|k| self.l[(k, k)].ln()).sum()
    }

    /// `L Lᵀ`.
    pub fn covariance(&self) -> Matrix {
        &self.l * self.l.transpose()
    }

    /// `(L Lᵀ)⁻¹`.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut linv = Matrix::identity(n, n);
        // Column k of L⁻¹ solves L x = e_k.
        for k in 0..n {
            let col = self.solve_lower(&linv.column(k).into_owned());
            linv.set_column(k, &col);
        }
        linv.transpose() * linv
    }

    /// `aᵀ L Lᵀ a`.
    pub fn quad_form(&self, a: &Vector) -> f64 {
        self.mul_t_vec(a).norm_squared()
    }
}

/// Re-runs the factorization by hand to report which pivot failed.
fn first_bad_pivot(a: &Matrix) -> LinalgError {
    let n = a.nrows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > 0.0) || !pivot.is_finite() {
            return LinalgError::NotPositiveDefinite { pivot: j, value: pivot };
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    LinalgError::NotPositiveDefinite { pivot: n - 1, value: f64::NAN }
}

/// `XᵀX` for a design matrix.
pub fn gram(x: &Matrix) -> Matrix {
    x.transpose() * x
}

/// `max |a - b|` over entries.
pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax()
}
