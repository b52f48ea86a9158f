use std::ops::{Add, AddAssign, Index, IndexMut, Mul, MulAssign, Neg, Sub, SubAssign};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Double-precision complex scalar.
pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Dense complex matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

/// Operand transformation for [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Use the matrix as is.
    None,
    /// Use the conjugate transpose.
    Adjoint,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        m
    }

    /// Builds a matrix from row-major entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter("matrix dimensions must be positive".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "CMatrix::from_vec",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from nested rows of real parts.
    pub fn from_real_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self::from_fn(r, c, |i, j| C64::new(rows[i][j], 0.0))
    }

    pub fn from_rows(rows: &[&[C64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self::from_fn(r, c, |i, j| rows[i][j])
    }

    pub fn from_diag(diag: &[C64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &z) in diag.iter().enumerate() {
            m.data[i * n + i] = z;
        }
        m
    }

    pub fn from_real_diag(diag: &[f64]) -> Self {
        let d: Vec<C64> = diag.iter().map(|&x| C64::new(x, 0.0)).collect();
        Self::from_diag(&d)
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [C64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn dagger(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j].conj();
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    /// Sum of the diagonal. Panics if the matrix is not square.
    pub fn trace(&self) -> C64 {
        assert!(self.is_square(), "trace of a non-square matrix");
        (0..self.rows).map(|i| self.data[i * self.cols + i]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Squared Frobenius norm.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Induced 1-norm (maximum absolute column sum).
    pub fn norm_one(&self) -> f64 {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, z) in sums.iter_mut().zip(self.row(i)) {
                *s += z.norm();
            }
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest entrywise deviation from Hermiticity, `max |a_ij - conj(a_ji)|`.
    pub fn hermitian_error(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut err = 0.0f64;
        for i in 0..n {
            for j in i..n {
                let d = self.data[i * n + j] - self.data[j * n + i].conj();
                err = err.max(d.norm());
            }
        }
        err
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermitian_error() <= tol
    }

    /// Matrix product with a dimension check.
    pub fn matmul(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                context: "matmul inner dimension",
                expected: self.cols,
                found: rhs.rows,
            });
        }
        Ok(product(self, Op::None, rhs, Op::None))
    }

    pub fn scaled(&self, alpha: C64) -> CMatrix {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| alpha * z).collect(),
        }
    }

    pub fn scale_mut(&mut self, alpha: C64) {
        self.data.iter_mut().for_each(|z| *z *= alpha);
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: C64, x: &CMatrix) {
        assert_eq!((self.rows, self.cols), (x.rows, x.cols), "axpy shape mismatch");
        for (y, &xv) in self.data.iter_mut().zip(&x.data) {
            *y += alpha * xv;
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|z| *z = ZERO);
    }

    /// `u * self * u^dagger`.
    pub fn conjugate_by(&self, u: &CMatrix) -> CMatrix {
        let tmp = product(u, Op::None, self, Op::None);
        product(&tmp, Op::None, u, Op::Adjoint)
    }

    /// `u^dagger * self * u`.
    pub fn conjugate_by_adjoint(&self, u: &CMatrix) -> CMatrix {
        let tmp = product(u, Op::Adjoint, self, Op::None);
        product(&tmp, Op::None, u, Op::None)
    }

    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Add<&CMatrix> for &CMatrix {
    type Output = CMatrix;

    fn add(self, rhs: &CMatrix) -> CMatrix {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl Sub<&CMatrix> for &CMatrix {
    type Output = CMatrix;

    fn sub(self, rhs: &CMatrix) -> CMatrix {
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl AddAssign<&CMatrix> for CMatrix {
    fn add_assign(&mut self, rhs: &CMatrix) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

impl SubAssign<&CMatrix> for CMatrix {
    fn sub_assign(&mut self, rhs: &CMatrix) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "sub shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
    }
}

impl Neg for &CMatrix {
    type Output = CMatrix;

    fn neg(self) -> CMatrix {
        self.scaled(-ONE)
    }
}

/// Matrix product; panics on an inner-dimension mismatch.
impl Mul<&CMatrix> for &CMatrix {
    type Output = CMatrix;

    fn mul(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        product(self, Op::None, rhs, Op::None)
    }
}

impl Mul<C64> for &CMatrix {
    type Output = CMatrix;

    fn mul(self, rhs: C64) -> CMatrix {
        self.scaled(rhs)
    }
}

impl Mul<f64> for &CMatrix {
    type Output = CMatrix;

    fn mul(self, rhs: f64) -> CMatrix {
        self.scaled(C64::new(rhs, 0.0))
    }
}

impl MulAssign<C64> for CMatrix {
    fn mul_assign(&mut self, rhs: C64) {
        self.scale_mut(rhs);
    }
}

#[inline]
fn op_shape(m: &CMatrix, op: Op) -> (usize, usize) {
    match op {
        Op::None => (m.rows, m.cols),
        Op::Adjoint => (m.cols, m.rows),
    }
}

/// `op(a) * op(b)` into a fresh matrix.
pub fn product(a: &CMatrix, ta: Op, b: &CMatrix, tb: Op) -> CMatrix {
    let (m, _) = op_shape(a, ta);
    let (_, n) = op_shape(b, tb);
    let mut c = CMatrix::zeros(m, n);
    gemm(ONE, a, ta, b, tb, ZERO, &mut c);
    c
}

/// Products below this many multiply-adds use a plain loop; packing overhead
/// dominates for the small blocks that make up most augmented states.
const SMALL_GEMM: usize = 16 * 16 * 16;

/// General matrix multiply `c = alpha * op(a) * op(b) + beta * c`.
pub fn gemm(alpha: C64, a: &CMatrix, ta: Op, b: &CMatrix, tb: Op, beta: C64, c: &mut CMatrix) {
    let (m, k) = op_shape(a, ta);
    let (k2, n) = op_shape(b, tb);
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape mismatch");

    if m * n * k <= SMALL_GEMM {
        small_gemm(alpha, a, ta, b, tb, beta, c, m, k, n);
        return;
    }

    let (buf_a, rsa, csa) = strided(a, ta);
    let (buf_b, rsb, csb) = strided(b, tb);
    use matrixmultiply::CGemmOption::Standard;
    // SAFETY: all pointers cover the full (m,k), (k,n), (m,n) extents implied by
    // the strides, and `c` does not alias `a` or `b` (it is borrowed mutably).
    unsafe {
        matrixmultiply::zgemm(
            Standard,
            Standard,
            m,
            k,
            n,
            [alpha.re, alpha.im],
            buf_a.as_ptr() as *const [f64; 2],
            rsa,
            csa,
            buf_b.as_ptr() as *const [f64; 2],
            rsb,
            csb,
            [beta.re, beta.im],
            c.data.as_mut_ptr() as *mut [f64; 2],
            c.cols as isize,
            1,
        );
    }
}

/// Buffer and strides for `op(m)`; the adjoint is a conjugated copy read
/// with swapped strides.
fn strided(m: &CMatrix, op: Op) -> (std::borrow::Cow<'_, [C64]>, isize, isize) {
    match op {
        Op::None => (std::borrow::Cow::Borrowed(&m.data), m.cols as isize, 1),
        Op::Adjoint => (
            std::borrow::Cow::Owned(m.data.iter().map(|z| z.conj()).collect()),
            1,
            m.cols as isize,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    alpha: C64,
    a: &CMatrix,
    ta: Op,
    b: &CMatrix,
    tb: Op,
    beta: C64,
    c: &mut CMatrix,
    m: usize,
    k: usize,
    n: usize,
) {
    let a_at = |i: usize, p: usize| match ta {
        Op::None => a.data[i * a.cols + p],
        Op::Adjoint => a.data[p * a.cols + i].conj(),
    };
    let b_owned;
    let b_rows: &CMatrix = match tb {
        Op::None => b,
        Op::Adjoint => {
            b_owned = b.dagger();
            &b_owned
        }
    };
    let mut acc = vec![ZERO; n];
    for i in 0..m {
        acc.iter_mut().for_each(|z| *z = ZERO);
        for p in 0..k {
            let aip = a_at(i, p);
            if aip == ZERO {
                continue;
            }
            for (z, &bv) in acc.iter_mut().zip(b_rows.row(p)) {
                *z += aip * bv;
            }
        }
        let row = c.row_mut(i);
        if beta == ZERO {
            for (dst, &z) in row.iter_mut().zip(&acc) {
                *dst = alpha * z;
            }
        } else {
            for (dst, &z) in row.iter_mut().zip(&acc) {
                *dst = beta * *dst + alpha * z;
            }
        }
    }
}

/// Raw strided multiply used by the blocked LU; operates on sub-blocks of
/// row-major buffers. `c = alpha * a * b + beta * c`.
///
/// # Safety
/// The pointer/stride triples must describe valid, non-overlapping (for `c`)
/// regions of the stated shapes.
#[allow(clippy::too_many_arguments)]
pub(crate) unsafe fn raw_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: C64,
    a: *const C64,
    lda: usize,
    b: *const C64,
    ldb: usize,
    beta: C64,
    c: *mut C64,
    ldc: usize,
) {
    use matrixmultiply::CGemmOption;
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    matrixmultiply::zgemm(
        CGemmOption::Standard,
        CGemmOption::Standard,
        m,
        k,
        n,
        [alpha.re, alpha.im],
        a as *const [f64; 2],
        lda as isize,
        1,
        b as *const [f64; 2],
        ldb as isize,
        1,
        [beta.re, beta.im],
        c as *mut [f64; 2],
        ldc as isize,
        1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(r: usize, c: usize, seed: u64) -> CMatrix {
        let mut s = seed;
        CMatrix::from_fn(r, c, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let x = ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5;
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let y = ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5;
            C64::new(x, y)
        })
    }

    fn naive(a: &CMatrix, b: &CMatrix) -> CMatrix {
        CMatrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|p| a[(i, p)] * b[(p, j)]).sum()
        })
    }

    #[test]
    fn frobenius_of_identity() {
        assert!((CMatrix::identity(2).frobenius_norm() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn trace_of_sigma_x_is_zero() {
        let sx = CMatrix::from_real_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(sx.trace(), ZERO);
    }

    #[test]
    fn dagger_is_an_involution() {
        let a = sample(3, 5, 1);
        assert_eq!(a.dagger().dagger(), a);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = sample(2, 3, 2);
        let b = sample(2, 3, 3);
        assert!(matches!(a.matmul(&b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gemm_paths_agree_with_naive_product() {
        for &(m, k, n) in &[(3, 4, 5), (40, 33, 21), (70, 70, 70)] {
            let a = sample(m, k, 7);
            let b = sample(k, n, 8);
            let c = a.matmul(&b).unwrap();
            assert!(c.max_abs_diff(&naive(&a, &b)) < 1e-12);

            let ah = a.dagger();
            let c2 = product(&ah, Op::Adjoint, &b, Op::None);
            assert!(c2.max_abs_diff(&c) < 1e-12);
            let bh = b.dagger();
            let c3 = product(&a, Op::None, &bh, Op::Adjoint);
            assert!(c3.max_abs_diff(&c) < 1e-12);
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = sample(20, 20, 4);
        let b = sample(20, 20, 5);
        let mut c = sample(20, 20, 6);
        let expected = &(&naive(&a, &b) * C64::new(0.5, 0.0)) + &(&c * C64::new(2.0, 0.0));
        gemm(C64::new(0.5, 0.0), &a, Op::None, &b, Op::None, C64::new(2.0, 0.0), &mut c);
        assert!(c.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn hermitian_check() {
        let a = sample(4, 4, 9);
        let h = &a + &a.dagger();
        assert!(h.is_hermitian(1e-12));
        assert!(!a.is_hermitian(1e-12));
    }
}
