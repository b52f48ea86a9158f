//! Dense complex linear algebra shared by every other module.

mod expm;
mod lu;
mod matrix;
mod sparse;

pub use expm::expm;
pub use lu::{solve, Lu};
pub use matrix::{gemm, product, CMatrix, Op, C64, I, ONE, ZERO};
pub use sparse::{SparseOp, SparseSuperOp};

use crate::error::{Error, Result};

/// Kronecker product `a (x) b`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (ra, ca) = (a.rows(), a.cols());
    let (rb, cb) = (b.rows(), b.cols());
    let mut out = CMatrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            let aij = a[(i, j)];
            if aij == ZERO {
                continue;
            }
            for k in 0..rb {
                let row = out.row_mut(i * rb + k);
                for (l, &bkl) in b.row(k).iter().enumerate() {
                    row[j * cb + l] = aij * bkl;
                }
            }
        }
    }
    out
}

/// Column-stacking vectorization: entry `(i, j)` lands at `i + j * rows`.
pub fn vec(a: &CMatrix) -> Vec<C64> {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// Inverse of [`vec`] for a square `d x d` matrix.
pub fn unvec(v: &[C64], d: usize) -> Result<CMatrix> {
    if d == 0 || v.len() != d * d {
        return Err(Error::DimensionMismatch {
            context: "unvec length",
            expected: d * d,
            found: v.len(),
        });
    }
    Ok(CMatrix::from_fn(d, d, |i, j| v[i + j * d]))
}

/// `[a, b] = ab - ba`.
pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let mut out = a * b;
    gemm(-ONE, b, Op::None, a, Op::None, ONE, &mut out);
    out
}

/// Hilbert-Schmidt inner product `tr(a^dagger b)`.
pub fn hs_inner(a: &CMatrix, b: &CMatrix) -> C64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()), "hs_inner shape mismatch");
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x.conj() * y)
        .sum()
}

/// `tr(a b)` without forming the product.
pub fn trace_product(a: &CMatrix, b: &CMatrix) -> C64 {
    assert_eq!(a.cols(), b.rows());
    assert_eq!(a.rows(), b.cols());
    let mut acc = ZERO;
    for i in 0..a.rows() {
        for (k, &aik) in a.row(i).iter().enumerate() {
            acc += aik * b[(k, i)];
        }
    }
    acc
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
///
/// Returns `(values, vectors)` with eigenvectors as columns of a unitary.
pub fn eigh(h: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    if !h.is_square() {
        return Err(Error::NotSquare {
            rows: h.rows(),
            cols: h.cols(),
        });
    }
    let n = h.rows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| h[(i, j)]);
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = CMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok((values, vectors))
}

/// Single-qubit Pauli and ladder matrices.
pub mod pauli {
    use super::{CMatrix, C64, I, ONE, ZERO};

    pub fn x() -> CMatrix {
        CMatrix::from_rows(&[&[ZERO, ONE], &[ONE, ZERO]])
    }

    pub fn y() -> CMatrix {
        CMatrix::from_rows(&[&[ZERO, -I], &[I, ZERO]])
    }

    pub fn z() -> CMatrix {
        CMatrix::from_rows(&[&[ONE, ZERO], &[ZERO, -ONE]])
    }

    /// Lowering operator `|0><1|`.
    pub fn lower() -> CMatrix {
        CMatrix::from_rows(&[&[ZERO, ONE], &[ZERO, ZERO]])
    }

    /// Raising operator `|1><0|`.
    pub fn raise() -> CMatrix {
        CMatrix::from_rows(&[&[ZERO, ZERO], &[ONE, ZERO]])
    }

    pub fn scalar(x: f64) -> C64 {
        C64::new(x, 0.0)
    }
}

/// Embeds single-site operators into an `n`-qubit register; qubit 0 is the
/// most significant tensor factor.
pub fn embed(ops: &[(usize, &CMatrix)], n_qubits: usize) -> CMatrix {
    let id = CMatrix::identity(2);
    let mut out: Option<CMatrix> = None;
    for q in 0..n_qubits {
        let factor = ops
            .iter()
            .find(|(site, _)| *site == q)
            .map_or(&id, |(_, m)| *m);
        out = Some(match out {
            None => factor.clone(),
            Some(acc) => kron(&acc, factor),
        });
    }
    out.expect("at least one qubit")
}
