//! Dense row-major `f64` matrices and the symmetric positive-definite solvers
//! behind the closed-form linear fit.
//!
//! Products are delegated to `matrixmultiply`'s single-threaded GEMM, whose
//! reduction order depends only on the operand shapes, so identical inputs
//! always give bitwise-identical outputs.

use std::fmt;

use crate::error::{Error, Result};

/// Dense 2-D matrix of `f64` in row-major order. Always at least 1×1.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            if r > 0 {
                write!(f, "; ")?;
            }
            let row = self.row(r);
            for (j, v) in row.iter().take(8).enumerate() {
                if j > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v:.6}")?;
            }
            if row.len() > 8 {
                write!(f, ", ..")?;
            }
        }
        if self.rows > 6 {
            write!(f, "; ..")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("matrix must be nonempty, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be nonempty");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix by evaluating `f(row, col)` at every entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be nonempty");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        if indices.is_empty() {
            return Err(Error::shape("cannot select zero rows"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::shape(format!("row index {i} out of range for {} rows", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(indices.len(), self.cols, data)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry of each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Which operand of a product is read transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    N,
    T,
}

fn op_dims(m: &Matrix, op: Op) -> (usize, usize, isize, isize) {
    let (rs, cs) = (m.cols as isize, 1isize);
    match op {
        Op::N => (m.rows, m.cols, rs, cs),
        Op::T => (m.cols, m.rows, cs, rs),
    }
}

fn gemm(a: &Matrix, op_a: Op, b: &Matrix, op_b: Op) -> Result<Matrix> {
    let (m, k, rsa, csa) = op_dims(a, op_a);
    let (k2, n, rsb, csb) = op_dims(b, op_b);
    if k != k2 {
        return Err(Error::shape(format!(
            "product inner dimensions differ: {m}x{k} times {k2}x{n}"
        )));
    }
    let mut c = Matrix::zeros(m, n);
    // SAFETY: the pointers and strides describe the full extents of `a`, `b` and
    // `c`, whose buffers are exactly rows*cols long; `c` does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(a, Op::N, b, Op::N)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(a, Op::T, b, Op::N)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(a, Op::N, b, Op::T)
}

/// Sum of squared entries.
pub fn frobenius_sq(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum()
}

pub fn frobenius(a: &Matrix) -> f64 {
    frobenius_sq(a).sqrt()
}

fn check_symmetric(g: &Matrix) -> Result<()> {
    if g.rows != g.cols {
        return Err(Error::shape(format!("expected a square matrix, got {}x{}", g.rows, g.cols)));
    }
    let tol = 1e-9 * g.max_abs().max(1.0);
    for i in 0..g.rows {
        for j in 0..i {
            if (g.get(i, j) - g.get(j, i)).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Lower-triangular Cholesky factor of `g + jitter·I`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
    jitter: f64,
}

impl Cholesky {
    /// Factors `g + jitter·I`. When the factorization breaks down the jitter is
    /// raised tenfold until it would exceed `1e-3 · trace(g) / n`.
    pub fn factor(g: &Matrix, jitter: f64) -> Result<Self> {
        check_symmetric(g)?;
        if !(jitter >= 0.0) || !jitter.is_finite() {
            return Err(Error::InvalidInput(format!("jitter must be finite and >= 0, got {jitter}")));
        }
        let n = g.rows;
        let mean_diag = g.trace() / n as f64;
        let cap = 1e-3 * mean_diag;
        let mut jitter = jitter;
        loop {
            if let Some(l) = try_cholesky(g, jitter) {
                return Ok(Self { l, jitter });
            }
            jitter = if jitter == 0.0 { 1e-10 * mean_diag } else { jitter * 10.0 };
            if !(mean_diag > 0.0) || jitter > cap {
                return Err(Error::SingularSystem(format!(
                    "{n}x{n} system not positive definite even with jitter up to {cap:.3e}"
                )));
            }
        }
    }

    /// Jitter that was actually added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Solves `(g + jitter·I) S = b` by forward then backward substitution.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.l.rows;
        if b.rows != n {
            return Err(Error::shape(format!(
                "right-hand side has {} rows, system has {n}",
                b.rows
            )));
        }
        let k = b.cols;
        let l = &self.l;
        let mut x = b.clone();
        // L y = b
        for i in 0..n {
            let li = l.row(i);
            let (done, rest) = x.data.split_at_mut(i * k);
            let xi = &mut rest[..k];
            for (p, &lip) in li[..i].iter().enumerate() {
                if lip != 0.0 {
                    let xp = &done[p * k..(p + 1) * k];
                    for (a, &b) in xi.iter_mut().zip(xp) {
                        *a -= lip * b;
                    }
                }
            }
            let d = li[i];
            for a in xi.iter_mut() {
                *a /= d;
            }
        }
        // Lᵀ s = y
        for i in (0..n).rev() {
            let (head, tail) = x.data.split_at_mut((i + 1) * k);
            let xi = &mut head[i * k..];
            for p in i + 1..n {
                let lpi = l.get(p, i);
                if lpi != 0.0 {
                    let xp = &tail[(p - i - 1) * k..(p - i) * k];
                    for (a, &b) in xi.iter_mut().zip(xp) {
                        *a -= lpi * b;
                    }
                }
            }
            let d = l.get(i, i);
            for a in xi.iter_mut() {
                *a /= d;
            }
        }
        Ok(x)
    }
}

fn try_cholesky(g: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = g.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j);
        let mut d = g.get(j, j) + jitter - lj[..j].iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let (upper, lower) = l.data.split_at_mut(i * n);
            let lj = &upper[j * n..j * n + j];
            let li = &mut lower[..n];
            let dot: f64 = li[..j].iter().zip(lj).map(|(a, b)| a * b).sum();
            li[j] = (g.get(i, j) - dot) / d;
        }
    }
    Some(l)
}

/// Solves `(g + jitter·I) S = b` for symmetric positive-definite `g`.
pub fn solve_spd(g: &Matrix, b: &Matrix, jitter: f64) -> Result<Matrix> {
    Cholesky::factor(g, jitter)?.solve(b)
}

/// Relative jitter applied to Gram systems, scaled by their mean diagonal.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-8;

/// Least-squares map `Z` with `xb · Z ≈ f`.
///
/// Fewer rows than columns (fat): minimum-norm interpolant
/// `xbᵀ (xb xbᵀ)⁻¹ f`. Otherwise (tall or square): normal equations
/// `(xbᵀ xb)⁻¹ xbᵀ f`. One step of iterative refinement against the
/// unjittered Gram matrix removes the bias introduced by the jitter.
pub fn lstsq(xb: &Matrix, f: &Matrix) -> Result<Matrix> {
    if xb.rows != f.rows {
        return Err(Error::shape(format!(
            "design matrix has {} rows, targets have {}",
            xb.rows, f.rows
        )));
    }
    if xb.rows < xb.cols {
        let gram = symmetrize(matmul_nt(xb, xb)?);
        let s = refined_solve(&gram, f)?;
        matmul_tn(xb, &s)
    } else {
        let gram = symmetrize(matmul_tn(xb, xb)?);
        let rhs = matmul_tn(xb, f)?;
        refined_solve(&gram, &rhs)
    }
}

fn refined_solve(gram: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let n = gram.rows as f64;
    let base = DEFAULT_RELATIVE_JITTER * gram.trace() / n;
    let chol = Cholesky::factor(gram, base)?;
    let mut s = chol.solve(rhs)?;
    if chol.jitter() <= base {
        let residual = rhs.sub(&matmul(gram, &s)?)?;
        s.axpy(1.0, &chol.solve(&residual)?)?;
    }
    Ok(s)
}

/// Averages `g` with its transpose so round-off asymmetry from GEMM vanishes.
fn symmetrize(mut g: Matrix) -> Matrix {
    let n = g.rows;
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (g.get(i, j) + g.get(j, i));
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}
