//! Dense row-major matrices and the numerical kernels built on them.
//!
//! Every product here uses a fixed accumulation order, so results are
//! bit-reproducible for a given build. The symmetric eigensolver is a cyclic
//! Jacobi iteration, which is plenty for the K <= 512 matrices this crate sees.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EspaceError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for c in 0..self.cols.min(8) {
                write!(f, "{:>12.6} ", self[(r, c)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EspaceError::shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EspaceError::Numerical {
                msg: "matrix data contains non-finite values".into(),
                residual: f64::NAN,
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Matrix of i.i.d. standard normal draws scaled by `std`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self[(r, c)] = *v;
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_range(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let mut out = Matrix::zeros(self.rows, end - start);
        for r in 0..self.rows {
            out.data[r * (end - start)..(r + 1) * (end - start)]
                .copy_from_slice(&self.data[r * self.cols + start..r * self.cols + end]);
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(EspaceError::shape("vstack: column counts differ"));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Concatenates matrices horizontally.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(EspaceError::shape("hstack: row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + p.cols].copy_from_slice(p.row(r));
            }
            offset += p.cols;
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, "elementwise op")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    fn check_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(EspaceError::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max-abs difference; `f64::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared Euclidean norm of each column.
    pub fn col_norms_sq(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v * v;
            }
        }
        out
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(A + Aᵀ) / 2` for a square matrix.
    pub fn symmetrized(&self) -> Matrix {
        let mut out = self.clone();
        out.symmetrize();
        out
    }

    pub fn symmetrize(&mut self) {
        debug_assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = m;
                self.data[j * n + i] = m;
            }
        }
    }
}

fn check_inner(op: &str, a: (usize, usize), b: (usize, usize), inner_a: usize, inner_b: usize) -> Result<()> {
    if inner_a != inner_b {
        return Err(EspaceError::shape(format!(
            "{op}: incompatible shapes {a:?} and {b:?}"
        )));
    }
    Ok(())
}

/// `a · b`, accumulated in i-k-j order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul", a.shape(), b.shape(), a.cols, b.rows)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn t_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("t_matmul", a.shape(), b.shape(), a.rows, b.rows)?;
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, aip) in a_row.iter().enumerate() {
            if *aip == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_t(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul_t", a.shape(), b.shape(), a.cols, b.cols)?;
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            out.data[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ordering applied to eigenpairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingMode {
    /// Largest eigenvalue first.
    #[default]
    Algebraic,
    /// Largest `|λ|` first.
    Absolute,
}

impl OrderingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OrderingMode::Algebraic => "algebraic",
            OrderingMode::Absolute => "absolute",
        }
    }
}

impl std::str::FromStr for OrderingMode {
    type Err = EspaceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "algebraic" => Ok(OrderingMode::Algebraic),
            "absolute" => Ok(OrderingMode::Absolute),
            other => Err(EspaceError::config(
                "ordering",
                format!("expected `algebraic` or `absolute`, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for OrderingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Eigenpairs of a symmetric matrix; `eigenvectors` holds one eigenvector per column.
#[derive(Debug, Clone)]
pub struct EvdResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
    pub ordering: OrderingMode,
    pub sweeps: usize,
}

impl EvdResult {
    /// `V · diag(λ) · Vᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let v = &self.eigenvectors;
        let mut vd = v.clone();
        for r in 0..vd.rows() {
            for (c, lambda) in self.eigenvalues.iter().enumerate() {
                vd[(r, c)] *= lambda;
            }
        }
        matmul_t(&vd, v).expect("square factors")
    }
}

pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_REL_TOL: f64 = 1e-12;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized first. Iterates until the off-diagonal Frobenius
/// norm drops to `1e-12 · ‖C‖_F`. Eigenvector signs are fixed so the first
/// nonzero component of each column is non-negative.
pub fn sym_evd(c: &Matrix, ordering: OrderingMode) -> Result<EvdResult> {
    sym_evd_with_limit(c, ordering, JACOBI_MAX_SWEEPS)
}

pub fn sym_evd_with_limit(c: &Matrix, ordering: OrderingMode, max_sweeps: usize) -> Result<EvdResult> {
    if !c.is_square() {
        return Err(EspaceError::shape(format!(
            "sym_evd needs a square matrix, got {:?}",
            c.shape()
        )));
    }
    if !c.is_finite() {
        return Err(EspaceError::Numerical {
            msg: "sym_evd input has non-finite entries".into(),
            residual: f64::NAN,
        });
    }
    let n = c.rows();
    let mut a = c.symmetrized();
    let mut v = Matrix::identity(n);
    let target = JACOBI_REL_TOL * a.frobenius_norm();

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a);
        if off <= target {
            break;
        }
        if sweeps == max_sweeps {
            return Err(EspaceError::Numerical {
                msg: format!("Jacobi EVD did not converge in {max_sweeps} sweeps"),
                residual: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
        sweeps += 1;
    }

    let diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    match ordering {
        OrderingMode::Algebraic => order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i])),
        OrderingMode::Absolute => order.sort_by(|&i, &j| diag[j].abs().total_cmp(&diag[i].abs())),
    }

    let mut vectors = Matrix::zeros(n, n);
    let mut eigenvalues = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues.push(diag[src]);
        let mut col = v.col(src);
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-10) {
            if *first < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
        }
        vectors.set_col(dst, &col);
    }

    Ok(EvdResult {
        eigenvalues,
        eigenvectors: vectors,
        ordering,
        sweeps,
    })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// One Jacobi rotation zeroing `a[p][q]`, accumulated into `v`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let n = a.rows();
    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let cos = 1.0 / (t * t + 1.0).sqrt();
    let sin = t * cos;

    // A <- Jᵀ A J, touching rows/cols p and q only.
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = cos * akp - sin * akq;
        a[(k, q)] = sin * akp + cos * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = cos * apk - sin * aqk;
        a[(q, k)] = sin * apk + cos * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = cos * vkp - sin * vkq;
        v[(k, q)] = sin * vkp + cos * vkq;
    }
}

/// K×L matrix with orthonormal columns from a seeded Gaussian draw.
///
/// Orthogonalized with two passes of modified Gram-Schmidt.
pub fn random_orthonormal(k: usize, l: usize, seed: u64) -> Result<Matrix> {
    if l > k {
        return Err(EspaceError::shape(format!(
            "random_orthonormal: l={l} exceeds k={k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Matrix::random_normal(k, l, 1.0, &mut rng);
    let mut cols: Vec<Vec<f64>> = (0..l).map(|j| g.col(j)).collect();
    for j in 0..l {
        for _pass in 0..2 {
            for i in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let proj = dot(&done[i], &rest[0]);
                for (x, y) in rest[0].iter_mut().zip(&done[i]) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt();
        if norm < 1e-12 {
            return Err(EspaceError::Numerical {
                msg: "random_orthonormal: degenerate Gaussian draw".into(),
                residual: norm,
            });
        }
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    let mut out = Matrix::zeros(k, l);
    for (j, col) in cols.iter().enumerate() {
        out.set_col(j, col);
    }
    Ok(out)
}

/// Determinant by partial-pivot Gaussian elimination. Test helper scale only.
pub fn determinant(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(EspaceError::shape("determinant of non-square matrix"));
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .expect("non-empty range");
        if a[(pivot, col)] == 0.0 {
            return Ok(0.0);
        }
        if pivot != col {
            for c in 0..n {
                let tmp = a[(pivot, c)];
                a[(pivot, c)] = a[(col, c)];
                a[(col, c)] = tmp;
            }
            det = -det;
        }
        det *= a[(col, col)];
        for r in (col + 1)..n {
            let f = a[(r, col)] / a[(col, col)];
            for c in col..n {
                let v = a[(col, c)];
                a[(r, c)] -= f * v;
            }
        }
    }
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_computed() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_zero_annihilates() {
        let b = Matrix::from_rows(&[&[1.0, -2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(matmul(&Matrix::zeros(2, 2), &b).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, EspaceError::Shape(_)));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let b = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let c = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let tn = t_matmul(&a, &b).unwrap();
        assert!(tn.max_abs_diff(&matmul(&a.transpose(), &b).unwrap()) < 1e-14);
        let nt = matmul_t(&a, &c).unwrap();
        assert!(nt.max_abs_diff(&matmul(&a, &c.transpose()).unwrap()) < 1e-14);
    }

    #[test]
    fn evd_diagonal() {
        let r = sym_evd(&Matrix::diag(&[4.0, 1.0]), OrderingMode::Algebraic).unwrap();
        assert_eq!(r.eigenvalues, vec![4.0, 1.0]);
        assert!(r.eigenvectors.max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }

    #[test]
    fn evd_two_by_two_by_hand() {
        let c = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let r = sym_evd(&c, OrderingMode::Algebraic).unwrap();
        assert!(close(r.eigenvalues[0], 3.0, 1e-14));
        assert!(close(r.eigenvalues[1], 1.0, 1e-14));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(r.eigenvectors[(0, 0)], s, 1e-14));
        assert!(close(r.eigenvectors[(1, 0)], s, 1e-14));
        assert!(close(r.eigenvectors[(0, 1)], s, 1e-14));
        assert!(close(r.eigenvectors[(1, 1)], -s, 1e-14));
    }

    #[test]
    fn evd_degenerate_identity() {
        let r = sym_evd(&Matrix::identity(3), OrderingMode::Algebraic).unwrap();
        assert_eq!(r.eigenvalues, vec![1.0, 1.0, 1.0]);
        let vvt = matmul_t(&r.eigenvectors, &r.eigenvectors).unwrap();
        assert!(vvt.max_abs_diff(&Matrix::identity(3)) < 1e-14);
    }

    #[test]
    fn evd_absolute_ordering() {
        let c = Matrix::diag(&[1.0, -5.0, 3.0]);
        let alg = sym_evd(&c, OrderingMode::Algebraic).unwrap();
        assert_eq!(alg.eigenvalues, vec![3.0, 1.0, -5.0]);
        let abs = sym_evd(&c, OrderingMode::Absolute).unwrap();
        assert_eq!(abs.eigenvalues, vec![-5.0, 3.0, 1.0]);
    }

    #[test]
    fn evd_rejects_non_square() {
        assert!(matches!(
            sym_evd(&Matrix::zeros(2, 3), OrderingMode::Algebraic),
            Err(EspaceError::Shape(_))
        ));
    }

    #[test]
    fn evd_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let c = matmul_t(&g, &g).unwrap();
        match sym_evd_with_limit(&c, OrderingMode::Algebraic, 0) {
            Err(EspaceError::Numerical { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn evd_zero_matrix() {
        let r = sym_evd(&Matrix::zeros(3, 3), OrderingMode::Algebraic).unwrap();
        assert_eq!(r.eigenvalues, vec![0.0; 3]);
    }

    #[test]
    fn random_orthonormal_square_has_unit_determinant() {
        let p = random_orthonormal(4, 4, 9).unwrap();
        assert!(close(determinant(&p).unwrap().abs(), 1.0, 1e-10));
    }

    #[test]
    fn random_orthonormal_columns() {
        let p = random_orthonormal(8, 3, 5).unwrap();
        let ptp = t_matmul(&p, &p).unwrap();
        assert!(ptp.max_abs_diff(&Matrix::identity(3)) <= 1e-10);
    }

    #[test]
    fn random_orthonormal_is_deterministic() {
        let a = random_orthonormal(8, 3, 77).unwrap();
        let b = random_orthonormal(8, 3, 77).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn random_orthonormal_rejects_wide() {
        assert!(matches!(random_orthonormal(3, 4, 0), Err(EspaceError::Shape(_))));
    }

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_normal(n, n, 1.0, &mut rng).symmetrized()
    }

    proptest! {
        #[test]
        fn evd_invariants(n in 1usize..24, seed in any::<u64>()) {
            let c = random_symmetric(n, seed);
            let norm = c.frobenius_norm();
            let r = sym_evd(&c, OrderingMode::Algebraic).unwrap();
            let v = &r.eigenvectors;

            let vtv = t_matmul(v, v).unwrap();
            prop_assert!(vtv.max_abs_diff(&Matrix::identity(n)) <= 1e-10);

            let resid = r.reconstruct().sub(&c).unwrap().frobenius_norm();
            prop_assert!(resid <= 1e-8 * norm);

            for (i, lambda) in r.eigenvalues.iter().enumerate() {
                let vi = Matrix::column(&v.col(i));
                let cv = matmul(&c, &vi).unwrap();
                let err = cv.sub(&vi.scale(*lambda)).unwrap().frobenius_norm();
                prop_assert!(err <= 1e-8 * norm);
            }

            let tr: f64 = r.eigenvalues.iter().sum();
            prop_assert!((tr - c.trace()).abs() <= 1e-10 * norm.max(1.0));

            prop_assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn random_orthonormal_property(k in 1usize..32, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let l = ((k as f64 * frac).floor() as usize).max(1);
            let p = random_orthonormal(k, l, seed).unwrap();
            let ptp = t_matmul(&p, &p).unwrap();
            prop_assert!(ptp.max_abs_diff(&Matrix::identity(l)) <= 1e-10);
        }
    }
}
