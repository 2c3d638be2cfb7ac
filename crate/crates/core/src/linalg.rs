//! Dense kernels for the small matrices that show up in condensed MPC
//! problems (a few hundred rows at most).
//!
//! Matrices are row-major, immutable once returned, and always finite.
//! Vectors are plain `Vec<f64>` / `&[f64]`.

use std::fmt;
use std::ops::Index;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("eigenvalue iteration did not converge after {0} sweeps")]
    NoConvergence(usize),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Pivots at or below this value are treated as loss of definiteness.
pub const PIVOT_TOL: f64 = 1e-13;
/// Relative asymmetry accepted before a matrix is symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-12;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting NaN/Inf.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} entries for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: k / cols.max(1),
                col: k % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of rows. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::DimensionMismatch(format!(
                    "row {} has {} entries, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Writes `block` into `self` with its top-left corner at `(r0, c0)`.
    pub(crate) fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        for i in 0..block.rows {
            let dst = (r0 + i) * self.cols + c0;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(i));
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), cols.len(), |i, j| self[(rows[i], cols[j])])
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "mat_vec {}x{} by length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch(format!(
                "elementwise {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
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

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn neg(&self) -> Matrix {
        self.scale(-1.0)
    }

    /// (M + Mᵀ)/2.
    pub fn symmetrize(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(LinalgError::DimensionMismatch(format!(
                "symmetrize needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self[(i, j)] + self[(j, i)])
        }))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Induced ∞-norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    /// Checks symmetry within `SYMMETRY_TOL·(1 + max|M|)` and returns the
    /// averaged matrix.
    fn checked_symmetric(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(LinalgError::DimensionMismatch(format!(
                "expected square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let asym = self.max_asymmetry();
        if asym > SYMMETRY_TOL * (1.0 + self.max_abs()) {
            return Err(LinalgError::NotSymmetric(asym));
        }
        self.symmetrize()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn vec_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn vec_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn vec_scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// Cholesky factor `L` with `H = L·Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactorization {
    lower: Matrix,
}

impl SpdFactorization {
    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// L·Lᵀ.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        Matrix::from_fn(n, n, |i, j| {
            let k = i.min(j) + 1;
            dot(&self.lower.row(i)[..k], &self.lower.row(j)[..k])
        })
    }

    /// Solves `H·x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "rhs length {} for factor of dimension {}",
                b.len(),
                n
            )));
        }
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let s = dot(&l.row(i)[..i], &y[..i]);
            y[i] = (y[i] - s) / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        Ok(y)
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// The input is symmetrized first; asymmetry beyond `1e-12·(1+max|H|)` is
/// rejected.
pub fn cholesky(h: &Matrix) -> Result<SpdFactorization> {
    let a = h.checked_symmetric()?;
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let pivot = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if pivot.is_nan() || pivot <= PIVOT_TOL {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l.set(i, j, s / d);
        }
    }
    Ok(SpdFactorization { lower: l })
}

/// Solves `H·X = B` column by column using a Cholesky factor of `H`.
pub fn solve_spd(f: &SpdFactorization, b: &Matrix) -> Result<Matrix> {
    if b.rows != f.dim() {
        return Err(LinalgError::DimensionMismatch(format!(
            "rhs has {} rows, factor dimension is {}",
            b.rows,
            f.dim()
        )));
    }
    let mut out = Matrix::zeros(b.rows, b.cols);
    for j in 0..b.cols {
        let x = f.solve_vec(&b.col(j))?;
        for (i, v) in x.into_iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Solves a general square system by Gaussian elimination with partial
/// pivoting. Fails with `NotPositiveDefinite` (reused as a singularity
/// signal) when a pivot falls below `1e-13·max|A|`.
pub fn solve_general(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows;
    if !a.is_square() || b.len() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "solve {}x{} with rhs length {}",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let (piv, pmax) = (k..n)
            .map(|i| (i, m[i * n + k].abs()))
            .fold((k, -1.0), |acc, v| if v.1 > acc.1 { v } else { acc });
        if pmax <= PIVOT_TOL * scale {
            return Err(LinalgError::NotPositiveDefinite {
                index: k,
                pivot: pmax,
            });
        }
        if piv != k {
            for j in 0..n {
                m.swap(k * n + j, piv * n + j);
            }
            x.swap(k, piv);
        }
        for i in (k + 1)..n {
            let f = m[i * n + k] / m[k * n + k];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                m[i * n + j] -= f * m[k * n + j];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let s: f64 = ((k + 1)..n).map(|j| m[k * n + j] * x[j]).sum();
        x[k] = (x[k] - s) / m[k * n + k];
    }
    Ok(x)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn sym_eigenvalues(sym: &Matrix) -> Result<Vec<f64>> {
    let a = sym.checked_symmetric()?;
    let n = a.rows;
    let mut m = a.data.clone();
    let at = |m: &[f64], i: usize, j: usize| m[i * n + j];
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let threshold = JACOBI_TOL * a.norm_fro().max(1.0);

    let mut sweeps = 0;
    while off(&m) > threshold {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence(sweeps));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = at(&m, p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = at(&m, p, p);
                let aqq = at(&m, q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| at(&m, i, i)).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

pub fn min_eigenvalue(sym: &Matrix) -> Result<f64> {
    Ok(sym_eigenvalues(sym)?.first().copied().unwrap_or(f64::INFINITY))
}

pub fn max_eigenvalue(sym: &Matrix) -> Result<f64> {
    Ok(sym_eigenvalues(sym)?
        .last()
        .copied()
        .unwrap_or(f64::NEG_INFINITY))
}

/// Kronecker product `left ⊗ right`.
pub fn kron(left: &Matrix, right: &Matrix) -> Matrix {
    let (p, q) = right.shape();
    Matrix::from_fn(left.rows * p, left.cols * q, |r, c| {
        left[(r / p, c / q)] * right[(r % p, c % q)]
    })
}

/// Spectral radius of a general square matrix via Gelfand's formula,
/// ρ = lim ‖Mᵏ‖^{1/k}, evaluated with repeated normalized squaring.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "spectral radius of a {}x{} matrix",
            m.rows, m.cols
        )));
    }
    let norm0 = m.norm_inf();
    if norm0 == 0.0 {
        return Ok(0.0);
    }
    // log‖M^(2^k)‖ tracked separately so the power never overflows.
    let mut power = m.scale(1.0 / norm0);
    let mut log_norm = norm0.ln();
    let mut estimate = norm0;
    for k in 1..=60u32 {
        let sq = power.matmul(&power)?;
        let nrm = sq.norm_inf();
        if nrm == 0.0 {
            return Ok(0.0);
        }
        log_norm = 2.0 * log_norm + nrm.ln();
        power = sq.scale(1.0 / nrm);
        let next = (log_norm / 2f64.powi(k as i32)).exp();
        if (next - estimate).abs() <= 1e-15 * estimate.max(1e-300) {
            return Ok(next);
        }
        estimate = next;
    }
    Ok(estimate)
}
