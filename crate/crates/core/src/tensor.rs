//! Minimal dense real-matrix arithmetic and a numeric gradient-checking
//! oracle. Everything is `f64`: the point of this crate is verification, and
//! finite-difference checks at 1e-4 tolerance are unreliable in `f32`.
//!
//! Summation order is fixed (left-to-right over the contracted index) so
//! repeated runs are bit-identical.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Dense row-major matrix of finite `f64` values.
///
/// Invariants: `rows >= 1`, `cols >= 1`, `data.len() == rows * cols`, and no
/// element is NaN or infinite. Checked constructors reject violations;
/// the arithmetic below cannot introduce non-finite values from finite,
/// reasonably scaled inputs, and the `net` module re-validates at its own
/// stage boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A dimension was zero or an input vector was empty.
    Empty { op: &'static str },
    /// Data length does not match `rows * cols`.
    BadLength { expected: usize, actual: usize },
    /// A NaN or infinite value at the given flat index.
    NonFinite { index: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            TensorError::Empty { op } => write!(f, "{op}: empty input"),
            TensorError::BadLength { expected, actual } => {
                write!(f, "data length {actual} does not match shape (expected {expected})")
            }
            TensorError::NonFinite { index } => {
                write!(f, "non-finite value at flat index {index}")
            }
        }
    }
}

impl core::error::Error for TensorError {}

impl Matrix {
    /// All-zero matrix. Panics on zero dimensions (programmer error).
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::Empty { op: "from_vec" });
        }
        if data.len() != rows * cols {
            return Err(TensorError::BadLength { expected: rows * cols, actual: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product; the contraction runs left-to-right over k so
    /// the result is deterministic.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[j * other.cols + k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.rows != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for i in 0..self.cols {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.rows {
                    acc += self.data[k * self.cols + i] * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self * x` for a length-`cols` slice.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec length mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for k in 0..self.cols {
                acc += self.data[i * self.cols + k] * x[k];
            }
            out[i] = acc;
        }
        out
    }

    /// Transposed matrix-vector product `self^T * x` for a length-`rows` slice.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t length mismatch");
        let mut out = vec![0.0; self.cols];
        for j in 0..self.cols {
            let mut acc = 0.0;
            for k in 0..self.rows {
                acc += self.data[k * self.cols + j] * x[k];
            }
            out[j] = acc;
        }
        out
    }

    /// Accumulates the scaled outer product `self += s * u v^T`.
    pub fn add_scaled_outer(&mut self, u: &[f64], v: &[f64], s: f64) {
        assert_eq!(u.len(), self.rows, "outer product row mismatch");
        assert_eq!(v.len(), self.cols, "outer product col mismatch");
        for i in 0..self.rows {
            for j in 0..self.cols {
                self.data[i * self.cols + j] += s * u[i] * v[j];
            }
        }
    }

    /// `self += s * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// Numerically stable softmax: shifts by the max before exponentiating.
///
/// Rejects empty input; finite inputs anywhere in [-700, 700] stay finite.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>, TensorError> {
    if v.is_empty() {
        return Err(TensorError::Empty { op: "softmax" });
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    debug_assert!(!v.is_empty());
    let mut max = v[0];
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log(sum(exp(v)))` with max-shift, for loss terms that must never see a
/// hard zero probability.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    debug_assert!(!v.is_empty());
    let mut max = v[0];
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for &x in v.iter() {
        sum += libm::exp(x - max);
    }
    max + libm::log(sum)
}

/// Outcome of comparing an analytic gradient against central finite
/// differences. `passed` holds exactly when
/// `max_relative_error <= tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks `grad_fn` against central finite differences of `loss_fn`,
/// coordinate by coordinate over the flat parameter vector.
///
/// The numeric estimate is `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` and
/// the relative error is `|a - n| / max(1e-12, |a| + |n|)`. `loss_fn` must be
/// deterministic (run the model in eval mode or with fixed dropout masks).
/// A non-finite loss at a perturbed point is reported as a failure carrying
/// the offending coordinate.
pub fn grad_check<L, G>(
    mut loss_fn: L,
    grad_fn: G,
    params: &[f64],
    eps: f64,
    tol: f64,
) -> GradCheckReport
where
    L: FnMut(&[f64]) -> f64,
    G: FnOnce(&[f64]) -> Vec<f64>,
{
    assert!(eps > 0.0, "grad_check requires eps > 0");
    let analytic = grad_fn(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");

    let mut scratch = params.to_vec();
    let mut max_rel = 0.0;
    let mut worst = 0;
    for i in 0..params.len() {
        scratch[i] = params[i] + eps;
        let plus = loss_fn(&scratch);
        scratch[i] = params[i] - eps;
        let minus = loss_fn(&scratch);
        scratch[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return GradCheckReport {
                max_relative_error: f64::INFINITY,
                worst_parameter_index: i,
                tolerance: tol,
                passed: false,
            };
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = abs(a - numeric) / f64::max(1e-12, abs(a) + abs(numeric));
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    GradCheckReport {
        max_relative_error: max_rel,
        worst_parameter_index: worst,
        tolerance: tol,
        passed: max_rel <= tol,
    }
}

pub(crate) fn abs(x: f64) -> f64 {
    libm::fabs(x)
}
