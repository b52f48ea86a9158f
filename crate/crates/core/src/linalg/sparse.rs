use super::matrix::{CMatrix, C64, ZERO};

/// Coordinate-list copy of a dense operator, used where the spin-chain
/// Lindblad operators are mostly zeros.
#[derive(Clone, Debug)]
pub struct SparseOp {
    dim: usize,
    entries: Vec<(usize, usize, C64)>,
}

impl SparseOp {
    pub fn from_dense(m: &CMatrix) -> Self {
        assert!(m.is_square());
        let n = m.rows();
        let mut entries = Vec::new();
        for i in 0..n {
            for (j, &z) in m.row(i).iter().enumerate() {
                if z != ZERO {
                    entries.push((i, j, z));
                }
            }
        }
        Self { dim: n, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, C64)] {
        &self.entries
    }

    /// `out += weight * c * rho * c^dagger`.
    pub fn add_sandwich(&self, weight: f64, rho: &CMatrix, out: &mut CMatrix) {
        for &(a, k, x) in &self.entries {
            let xw = x * weight;
            let rho_k = rho.row(k);
            let out_a = out.row_mut(a);
            for &(b, l, y) in &self.entries {
                out_a[b] += xw * rho_k[l] * y.conj();
            }
        }
    }

    /// `out += weight * c^dagger * rho * c`.
    pub fn add_adjoint_sandwich(&self, weight: f64, rho: &CMatrix, out: &mut CMatrix) {
        for &(k, a, x) in &self.entries {
            let xw = x.conj() * weight;
            let rho_k = rho.row(k);
            let out_a = out.row_mut(a);
            for &(l, b, y) in &self.entries {
                out_a[b] += xw * rho_k[l] * y;
            }
        }
    }
}

/// A sparse `d^2 x d^2` superoperator acting on column-stacked matrices.
#[derive(Clone, Debug)]
pub struct SparseSuperOp {
    dim: usize,
    /// `(row, col, value)` in vec-index space, duplicates merged.
    entries: Vec<(usize, usize, C64)>,
}

impl SparseSuperOp {
    /// `sum_i w_i conj(c_i) (x) c_i`, the vectorized form of `rho -> sum_i w_i c_i rho c_i^dagger`.
    pub fn collapse(ops: &[(SparseOp, f64)]) -> Self {
        let dim = ops.first().map_or(1, |(c, _)| c.dim());
        let mut map = std::collections::BTreeMap::<(usize, usize), C64>::new();
        for (c, w) in ops {
            // vec(c X c^dag)[a + b d] = sum_{k,l} c[a,k] conj(c[b,l]) X[k,l]
            for &(a, k, x) in c.entries() {
                for &(b, l, y) in c.entries() {
                    let row = a + b * dim;
                    let col = k + l * dim;
                    *map.entry((row, col)).or_insert(ZERO) += x * y.conj() * *w;
                }
            }
        }
        Self {
            dim,
            entries: map.into_iter().map(|((r, c), v)| (r, c, v)).collect(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Conjugate transpose in vec-index space.
    pub fn adjoint(&self) -> Self {
        let mut entries: Vec<_> = self.entries.iter().map(|&(r, c, v)| (c, r, v.conj())).collect();
        entries.sort_by_key(|&(r, c, _)| (r, c));
        Self { dim: self.dim, entries }
    }

    /// `I + a S + (a^2 / 2) S^2` as a single sparse map.
    pub fn truncated_exp2(&self, a: f64) -> Self {
        let mut by_row = std::collections::HashMap::<usize, Vec<(usize, C64)>>::new();
        for &(r, c, v) in &self.entries {
            by_row.entry(r).or_default().push((c, v));
        }
        let mut map = std::collections::BTreeMap::<(usize, usize), C64>::new();
        for i in 0..self.dim * self.dim {
            *map.entry((i, i)).or_insert(ZERO) += C64::new(1.0, 0.0);
        }
        for &(r, c, v) in &self.entries {
            *map.entry((r, c)).or_insert(ZERO) += v * a;
            if let Some(next) = by_row.get(&c) {
                for &(c2, w) in next {
                    *map.entry((r, c2)).or_insert(ZERO) += v * w * (0.5 * a * a);
                }
            }
        }
        Self {
            dim: self.dim,
            entries: map.into_iter().filter(|(_, v)| *v != ZERO).map(|((r, c), v)| (r, c, v)).collect(),
        }
    }

    /// `out += S vec(rho)`, written back in matrix form.
    pub fn add_apply(&self, rho: &CMatrix, out: &mut CMatrix) {
        let d = self.dim;
        for &(r, c, v) in &self.entries {
            let (k, l) = (c % d, c / d);
            let (a, b) = (r % d, r / d);
            out[(a, b)] += v * rho[(k, l)];
        }
    }

    /// `out += S^dagger vec(rho)`.
    pub fn add_apply_adjoint(&self, rho: &CMatrix, out: &mut CMatrix) {
        let d = self.dim;
        for &(r, c, v) in &self.entries {
            let (k, l) = (c % d, c / d);
            let (a, b) = (r % d, r / d);
            out[(k, l)] += v.conj() * rho[(a, b)];
        }
    }
}
