//! Minimal dense linear algebra for the low-dimensional models used here:
//! row-major matrices, Cholesky factorization, and multivariate normals.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("matrix rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dimension("ragged matrix rows".to_string()));
        }
        let data = rows.iter().flatten().copied().collect();
        Mat::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    /// `out += self * x`.
    pub fn matvec_add(&self, x: &[F], out: &mut [F]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let mut acc = F::zero();
            for c in 0..self.cols {
                acc = acc + self.get(r, c) * x[c];
            }
            out[r] += acc;
        }
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky<F> {
    lower: Mat<F>,
}

impl<F: Scalar> Cholesky<F> {
    pub fn new(matrix: &Mat<F>) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::dimension("Cholesky of non-square matrix".to_string()));
        }
        let n = matrix.rows();
        let mut lower = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut acc = matrix.get(i, j);
                for k in 0..j {
                    acc = acc - lower.get(i, k) * lower.get(j, k);
                }
                if i == j {
                    if acc <= F::zero() {
                        return Err(Error::config(
                            "matrix is not positive definite".to_string(),
                        ));
                    }
                    lower.set(i, j, acc.sqrt());
                } else {
                    lower.set(i, j, acc / lower.get(j, j));
                }
            }
        }
        Ok(Cholesky { lower })
    }

    pub fn lower(&self) -> &Mat<F> {
        &self.lower
    }

    /// Solves `L y = b` by forward substitution.
    pub fn forward_solve(&self, b: &[F]) -> Vec<F> {
        let n = self.lower.rows();
        debug_assert_eq!(b.len(), n);
        let mut y = vec![F::zero(); n];
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc = acc - self.lower.get(i, k) * y[k];
            }
            y[i] = acc / self.lower.get(i, i);
        }
        y
    }

    pub fn log_det(&self) -> F {
        let n = self.lower.rows();
        let mut acc = F::zero();
        for i in 0..n {
            acc = acc + self.lower.get(i, i).ln();
        }
        acc + acc
    }
}

/// Multivariate normal with precomputed Cholesky factor.
#[derive(Clone, Debug)]
pub struct MvNormal<F> {
    mean: Vec<F>,
    chol: Cholesky<F>,
    log_norm: F,
}

impl<F: Scalar> MvNormal<F> {
    pub fn new(mean: Vec<F>, cov: &Mat<F>) -> Result<Self> {
        if cov.rows() != mean.len() {
            return Err(Error::dimension(format!(
                "covariance is {}x{} but mean has length {}",
                cov.rows(),
                cov.cols(),
                mean.len()
            )));
        }
        let chol = Cholesky::new(cov)?;
        let d = F::from_count(mean.len());
        let two_pi = F::cast(std::f64::consts::TAU);
        let log_norm = -F::cast(0.5) * (d * two_pi.ln() + chol.log_det());
        Ok(MvNormal {
            mean,
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Vec<F> {
        let n = self.mean.len();
        let z: Vec<F> = (0..n).map(|_| F::std_normal(rng)).collect();
        let mut out = self.mean.clone();
        for r in 0..n {
            for c in 0..=r {
                out[r] += self.chol.lower().get(r, c) * z[c];
            }
        }
        out
    }

    pub fn log_density(&self, x: &[F]) -> F {
        debug_assert_eq!(x.len(), self.mean.len());
        let diff: Vec<F> = x
            .iter()
            .zip(&self.mean)
            .map(|(&a, &b)| a - b)
            .collect();
        let y = self.chol.forward_solve(&diff);
        let quad = y.iter().fold(F::zero(), |acc, &v| acc + v * v);
        self.log_norm - F::cast(0.5) * quad
    }
}

/// Log-density of a scalar normal.
pub fn normal_log_density<F: Scalar>(x: F, mean: F, std_dev: F) -> F {
    let z = (x - mean) / std_dev;
    let two_pi = F::cast(std::f64::consts::TAU);
    -F::cast(0.5) * (z * z + two_pi.ln()) - std_dev.ln()
}
