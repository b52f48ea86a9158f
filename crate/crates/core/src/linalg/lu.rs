//! Blocked LU factorization with partial pivoting.
//!
//! Right-looking variant: each panel is factored with a plain loop and the
//! trailing submatrix is updated with one GEMM, so the bulk of the work runs
//! at matrix-multiply speed. The solve phase is blocked the same way.

use super::matrix::{raw_gemm, CMatrix, C64, ONE};
use crate::error::{Error, Result};

const BLOCK: usize = 64;

/// `P A = L U` with unit-lower `L` and upper `U` packed in one matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    factors: CMatrix,
    /// `perm[i]` is the original row now stored at position `i`.
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &CMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NotSquare {
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let data = lu.as_mut_slice();

        let mut k0 = 0;
        while k0 < n {
            let kb = BLOCK.min(n - k0);
            let k1 = k0 + kb;

            // Panel factorization over columns k0..k1.
            for j in k0..k1 {
                let mut p = j;
                let mut best = data[j * n + j].norm();
                for i in j + 1..n {
                    let v = data[i * n + j].norm();
                    if v > best {
                        best = v;
                        p = i;
                    }
                }
                if best == 0.0 || !best.is_finite() {
                    return Err(Error::Singular);
                }
                if p != j {
                    for c in 0..n {
                        data.swap(j * n + c, p * n + c);
                    }
                    perm.swap(j, p);
                }
                let inv = ONE / data[j * n + j];
                for i in j + 1..n {
                    let l = data[i * n + j] * inv;
                    data[i * n + j] = l;
                    if l != C64::new(0.0, 0.0) {
                        for c in j + 1..k1 {
                            let u = data[j * n + c];
                            data[i * n + c] -= l * u;
                        }
                    }
                }
            }

            if k1 < n {
                // U12 = L11^{-1} A12.
                for r in k0..k1 {
                    for t in k0..r {
                        let l = data[r * n + t];
                        if l == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for c in k1..n {
                            let u = data[t * n + c];
                            data[r * n + c] -= l * u;
                        }
                    }
                }
                // A22 -= L21 * U12.
                let base = data.as_mut_ptr();
                // SAFETY: L21 (rows k1.., cols k0..k1), U12 (rows k0..k1, cols k1..)
                // and A22 (rows k1.., cols k1..) are disjoint regions of `data`.
                unsafe {
                    raw_gemm(
                        n - k1,
                        kb,
                        n - k1,
                        -ONE,
                        base.add(k1 * n + k0),
                        n,
                        base.add(k0 * n + k1),
                        n,
                        ONE,
                        base.add(k1 * n + k1),
                        n,
                    );
                }
            }
            k0 = k1;
        }
        Ok(Self { factors: lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solves `A X = B` for a block of right-hand sides.
    pub fn solve(&self, b: &CMatrix) -> Result<CMatrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::DimensionMismatch {
                context: "LU solve right-hand side",
                expected: n,
                found: b.rows(),
            });
        }
        let m = b.cols();
        let mut x = CMatrix::zeros(n, m);
        for i in 0..n {
            x.row_mut(i).copy_from_slice(b.row(self.perm[i]));
        }
        let lu = self.factors.as_slice();
        let xs = x.as_mut_slice();

        // Forward substitution with unit-lower L.
        let mut i0 = 0;
        while i0 < n {
            let i1 = (i0 + BLOCK).min(n);
            if i0 > 0 {
                let base = xs.as_mut_ptr();
                // SAFETY: reads rows 0..i0 of X, writes rows i0..i1; disjoint.
                unsafe {
                    raw_gemm(
                        i1 - i0,
                        i0,
                        m,
                        -ONE,
                        lu.as_ptr().add(i0 * n),
                        n,
                        base,
                        m,
                        ONE,
                        base.add(i0 * m),
                        m,
                    );
                }
            }
            for r in i0..i1 {
                for t in i0..r {
                    let l = lu[r * n + t];
                    if l == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let (head, tail) = xs.split_at_mut(r * m);
                    let src = &head[t * m..(t + 1) * m];
                    for (d, &s) in tail[..m].iter_mut().zip(src) {
                        *d -= l * s;
                    }
                }
            }
            i0 = i1;
        }

        // Back substitution with U.
        let mut i1 = n;
        while i1 > 0 {
            let i0 = i1.saturating_sub(BLOCK);
            if i1 < n {
                let base = xs.as_mut_ptr();
                // SAFETY: reads rows i1..n of X, writes rows i0..i1; disjoint.
                unsafe {
                    raw_gemm(
                        i1 - i0,
                        n - i1,
                        m,
                        -ONE,
                        lu.as_ptr().add(i0 * n + i1),
                        n,
                        base.add(i1 * m),
                        m,
                        ONE,
                        base.add(i0 * m),
                        m,
                    );
                }
            }
            for r in (i0..i1).rev() {
                for t in r + 1..i1 {
                    let u = lu[r * n + t];
                    if u == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let (head, tail) = xs.split_at_mut(t * m);
                    let dst = &mut head[r * m..(r + 1) * m];
                    for (d, &s) in dst.iter_mut().zip(&tail[..m]) {
                        *d -= u * s;
                    }
                }
                let inv = ONE / lu[r * n + r];
                for d in &mut xs[r * m..(r + 1) * m] {
                    *d *= inv;
                }
            }
            i1 = i0;
        }
        Ok(x)
    }
}

/// Solves `A X = B`.
pub fn solve(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    Lu::factor(a)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, rng: &mut ChaCha8Rng) -> CMatrix {
        CMatrix::from_fn(n, m, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
    }

    #[test]
    fn solves_random_systems_across_block_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &n in &[1, 5, 63, 64, 65, 150] {
            let a = random(n, n, &mut rng);
            let x = random(n, 7, &mut rng);
            let b = &a * &x;
            let got = solve(&a, &b).unwrap();
            assert!(got.max_abs_diff(&x) < 1e-9, "n = {n}");
        }
    }

    #[test]
    fn needs_pivoting() {
        let a = CMatrix::from_real_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let b = CMatrix::from_real_rows(&[&[2.0], &[3.0]]);
        let x = solve(&a, &b).unwrap();
        assert!((x[(0, 0)] - C64::new(3.0, 0.0)).norm() < 1e-15);
        assert!((x[(1, 0)] - C64::new(2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn singular_is_reported() {
        let a = CMatrix::from_real_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert_eq!(Lu::factor(&a).unwrap_err(), Error::Singular);
    }
}
