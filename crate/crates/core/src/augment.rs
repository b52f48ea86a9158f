//! Taylor-augmented Lindblad system: multi-index bookkeeping, block states
//! and the block-wise superoperator actions.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{commutator, gemm, hs_inner, kron, CMatrix, Op, SparseOp, C64, I, ONE, ZERO};
use crate::model::OpenSystemModel;

/// Default limit on the side of an assembled augmented supermatrix.
pub const DEFAULT_SUPERMATRIX_CAP: usize = 20_000;

/// Truncated multi-indices `(p_1, ..., p_m)` with `sum p <= n`, in descending
/// base-`(n+1)` order so the zero-order index comes last.
#[derive(Clone, Debug)]
pub struct MultiIndexSet {
    m: usize,
    n: usize,
    orders: Vec<Vec<u32>>,
    position: HashMap<Vec<u32>, usize>,
    /// `lower[j][k]`: index of `p - e_j`, when `p_j >= 1`.
    lower: Vec<Vec<Option<usize>>>,
    /// `raise[j][k]`: index of `p + e_j`, when still inside the truncation.
    raise: Vec<Vec<Option<usize>>>,
}

impl MultiIndexSet {
    pub fn new(m: usize, n: usize) -> Self {
        let mut orders = Vec::new();
        let mut cur = vec![0u32; m];
        enumerate(&mut cur, 0, n as u32, &mut orders);
        let base = (n + 1) as u128;
        let value = |p: &[u32]| p.iter().fold(0u128, |acc, &x| acc * base + x as u128);
        orders.sort_by_key(|p| std::cmp::Reverse(value(p)));

        let position: HashMap<Vec<u32>, usize> =
            orders.iter().enumerate().map(|(k, p)| (p.clone(), k)).collect();
        let mut lower = vec![vec![None; orders.len()]; m];
        let mut raise = vec![vec![None; orders.len()]; m];
        for (k, p) in orders.iter().enumerate() {
            for j in 0..m {
                if p[j] >= 1 {
                    let mut q = p.clone();
                    q[j] -= 1;
                    let l = position[&q];
                    lower[j][k] = Some(l);
                    raise[j][l] = Some(k);
                }
            }
        }
        Self {
            m,
            n,
            orders,
            position,
            lower,
            raise,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of blocks `N = (m+n)! / (m! n!)`.
    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    pub fn orders(&self) -> &[Vec<u32>] {
        &self.orders
    }

    pub fn order(&self, k: usize) -> &[u32] {
        &self.orders[k]
    }

    pub fn index_of(&self, p: &[u32]) -> Option<usize> {
        self.position.get(p).copied()
    }

    /// Index of the zero-order block.
    pub fn zero_index(&self) -> usize {
        self.orders.len() - 1
    }

    pub fn lower(&self, j: usize, k: usize) -> Option<usize> {
        self.lower[j][k]
    }

    pub fn raise(&self, j: usize, k: usize) -> Option<usize> {
        self.raise[j][k]
    }

    /// Total degree of block `k`.
    pub fn degree(&self, k: usize) -> u32 {
        self.orders[k].iter().sum()
    }

    /// `N_j`: number of blocks with `p_j >= 1`.
    pub fn count_with(&self, j: usize) -> usize {
        self.lower[j].iter().filter(|x| x.is_some()).count()
    }

    /// Dense integer incidence matrix `R_j` (row `k`, column `lower_j(k)`).
    pub fn incidence(&self, j: usize) -> Vec<Vec<i64>> {
        let n = self.len();
        let mut r = vec![vec![0i64; n]; n];
        for (k, l) in self.lower[j].iter().enumerate() {
            if let Some(l) = l {
                r[k][*l] = 1;
            }
        }
        r
    }
}

fn enumerate(cur: &mut Vec<u32>, pos: usize, budget: u32, out: &mut Vec<Vec<u32>>) {
    if pos == cur.len() {
        out.push(cur.clone());
        return;
    }
    for v in 0..=budget {
        cur[pos] = v;
        enumerate(cur, pos + 1, budget - v, out);
    }
    cur[pos] = 0;
}

/// `N` blocks of `d x d` matrices, indexed like a [`MultiIndexSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub blocks: Vec<CMatrix>,
}

impl AugmentedState {
    pub fn zeros(n_blocks: usize, d: usize) -> Self {
        Self {
            blocks: vec![CMatrix::zeros(d, d); n_blocks],
        }
    }

    /// Initial condition: `rho0` in the zero-order slot, zeros elsewhere.
    pub fn initial(mset: &MultiIndexSet, rho0: &CMatrix) -> Self {
        let mut s = Self::zeros(mset.len(), rho0.rows());
        s.blocks[mset.zero_index()] = rho0.clone();
        s
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].rows()
    }

    pub fn zero_order(&self) -> &CMatrix {
        self.blocks.last().expect("non-empty state")
    }

    /// `sum_k <a_k, b_k>` (Hilbert-Schmidt).
    pub fn inner(&self, other: &Self) -> C64 {
        self.blocks.iter().zip(&other.blocks).map(|(a, b)| hs_inner(a, b)).sum()
    }

    /// Block norms combined in quadrature.
    pub fn frobenius_norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn axpy(&mut self, alpha: C64, other: &Self) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: C64) {
        for b in &mut self.blocks {
            b.scale_mut(alpha);
        }
    }

    pub fn max_hermitian_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.hermitian_error()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.is_finite())
    }

    /// Column-stacked blocks in index order.
    pub fn to_vec(&self) -> Vec<C64> {
        self.blocks.iter().flat_map(crate::linalg::vec).collect()
    }

    pub fn from_vec(v: &[C64], n_blocks: usize, d: usize) -> Result<Self> {
        if v.len() != n_blocks * d * d {
            return Err(Error::DimensionMismatch {
                context: "stacked augmented state",
                expected: n_blocks * d * d,
                found: v.len(),
            });
        }
        let blocks = v
            .chunks(d * d)
            .map(|c| crate::linalg::unvec(c, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }
}

/// The Lindblad superoperator at fixed control amplitudes, written with the
/// effective Hamiltonian `G = H_S - (i/2) sum_i gamma_i c_i^dag c_i`.
#[derive(Clone, Debug)]
pub struct LindbladGenerator {
    h: CMatrix,
    g: CMatrix,
    jumps: Vec<(SparseOp, f64)>,
}

impl LindbladGenerator {
    pub fn new(model: &OpenSystemModel, amplitudes: &[f64]) -> Result<Self> {
        let h = model.system_hamiltonian(amplitudes)?;
        Ok(Self::from_hamiltonian(model, h))
    }

    /// Generator for `h` together with the model's jump operators.
    pub fn from_hamiltonian(model: &OpenSystemModel, h: CMatrix) -> Self {
        let mut g = h.clone();
        let mut jumps = Vec::new();
        for l in model.lindblads() {
            if l.rate == 0.0 {
                continue;
            }
            let k = crate::linalg::product(&l.op, Op::Adjoint, &l.op, Op::None);
            g.axpy(C64::new(0.0, -0.5 * l.rate), &k);
            jumps.push((SparseOp::from_dense(&l.op), l.rate));
        }
        Self { h, g, jumps }
    }

    pub fn hamiltonian(&self) -> &CMatrix {
        &self.h
    }

    /// Non-Hermitian effective Hamiltonian `G`.
    pub fn effective(&self) -> &CMatrix {
        &self.g
    }

    pub fn jumps(&self) -> &[(SparseOp, f64)] {
        &self.jumps
    }

    /// `out = L(rho) = -i(G rho - rho G^dag) + sum gamma c rho c^dag`.
    pub fn apply_into(&self, rho: &CMatrix, out: &mut CMatrix) {
        gemm(-I, &self.g, Op::None, rho, Op::None, ZERO, out);
        gemm(I, rho, Op::None, &self.g, Op::Adjoint, ONE, out);
        for (c, w) in &self.jumps {
            c.add_sandwich(*w, rho, out);
        }
    }

    /// `out = L^dag(rho) = i(G^dag rho - rho G) + sum gamma c^dag rho c`.
    pub fn apply_adjoint_into(&self, rho: &CMatrix, out: &mut CMatrix) {
        gemm(I, &self.g, Op::Adjoint, rho, Op::None, ZERO, out);
        gemm(-I, rho, Op::None, &self.g, Op::None, ONE, out);
        for (c, w) in &self.jumps {
            c.add_adjoint_sandwich(*w, rho, out);
        }
    }

    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(rho.rows(), rho.cols());
        self.apply_into(rho, &mut out);
        out
    }

    pub fn apply_adjoint(&self, rho: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(rho.rows(), rho.cols());
        self.apply_adjoint_into(rho, &mut out);
        out
    }

    /// Column-stacked `d^2 x d^2` matrix of the generator.
    pub fn supermatrix(&self) -> CMatrix {
        let d = self.h.rows();
        let id = CMatrix::identity(d);
        // -i(G rho - rho G^dag)  ->  -i(I (x) G) + i(conj(G) (x) I)
        let mut m = kron(&id, &self.g).scaled(-I);
        m.axpy(I, &kron(&self.g.conj(), &id));
        for (c, w) in &self.jumps {
            let dense = sparse_to_dense(c);
            m.axpy(C64::new(*w, 0.0), &kron(&dense.conj(), &dense));
        }
        m
    }
}

fn sparse_to_dense(c: &SparseOp) -> CMatrix {
    let mut m = CMatrix::zeros(c.dim(), c.dim());
    for &(i, j, z) in c.entries() {
        m[(i, j)] = z;
    }
    m
}

/// Applies the Lindblad generator to every block; blocks do not mix.
pub fn apply_l(gen: &LindbladGenerator, state: &AugmentedState) -> AugmentedState {
    AugmentedState {
        blocks: state.blocks.iter().map(|b| gen.apply(b)).collect(),
    }
}

pub fn apply_l_adjoint(gen: &LindbladGenerator, state: &AugmentedState) -> AugmentedState {
    AugmentedState {
        blocks: state.blocks.iter().map(|b| gen.apply_adjoint(b)).collect(),
    }
}

/// `out[k] = -i [E_j, rho[lower_j(k)]]` for `p_j(k) >= 1`, zero otherwise.
pub fn apply_ej(j: usize, e: &CMatrix, mset: &MultiIndexSet, state: &AugmentedState) -> AugmentedState {
    let d = state.dim();
    let blocks = (0..mset.len())
        .map(|k| match mset.lower(j, k) {
            Some(l) => commutator(e, &state.blocks[l]).scaled(-I),
            None => CMatrix::zeros(d, d),
        })
        .collect();
    AugmentedState { blocks }
}

/// Adjoint of [`apply_ej`]: `out[l] = i [E_j, rho[raise_j(l)]]`.
pub fn apply_ej_adjoint(j: usize, e: &CMatrix, mset: &MultiIndexSet, state: &AugmentedState) -> AugmentedState {
    let d = state.dim();
    let blocks = (0..mset.len())
        .map(|l| match mset.raise(j, l) {
            Some(k) => commutator(e, &state.blocks[k]).scaled(I),
            None => CMatrix::zeros(d, d),
        })
        .collect();
    AugmentedState { blocks }
}

/// `-i(I (x) E - E^T (x) I)`, the matrix of `rho -> -i[E, rho]`.
pub fn commutator_supermatrix(e: &CMatrix) -> CMatrix {
    let id = CMatrix::identity(e.rows());
    let mut m = kron(&id, e).scaled(-I);
    m.axpy(I, &kron(&e.transpose(), &id));
    m
}

/// Full augmented generator `I_N (x) mat(L) + sum_j R_j (x) mat(E_j)`.
pub fn assemble_supermatrix(
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    amplitudes: &[f64],
    cap: usize,
) -> Result<CMatrix> {
    let gen = LindbladGenerator::new(model, amplitudes)?;
    assemble_from_generator(&gen, model, mset, cap)
}

pub fn assemble_from_generator(
    gen: &LindbladGenerator,
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    cap: usize,
) -> Result<CMatrix> {
    check_order(model, mset)?;
    let d2 = model.dim() * model.dim();
    let dim = mset.len() * d2;
    if dim > cap {
        return Err(Error::CapExceeded { dim, cap });
    }
    let ml = gen.supermatrix();
    let me: Vec<CMatrix> = model.uncertainties().iter().map(commutator_supermatrix).collect();
    let mut out = CMatrix::zeros(dim, dim);
    let mut put = |bk: usize, bl: usize, m: &CMatrix| {
        for r in 0..d2 {
            let dst = &mut out.row_mut(bk * d2 + r)[bl * d2..(bl + 1) * d2];
            for (x, &y) in dst.iter_mut().zip(m.row(r)) {
                *x += y;
            }
        }
    };
    for k in 0..mset.len() {
        put(k, k, &ml);
        for (j, mej) in me.iter().enumerate() {
            if let Some(l) = mset.lower(j, k) {
                put(k, l, mej);
            }
        }
    }
    Ok(out)
}

pub(crate) fn check_order(model: &OpenSystemModel, mset: &MultiIndexSet) -> Result<()> {
    if model.n_uncertainties() != mset.m() {
        return Err(Error::DimensionMismatch {
            context: "uncertainty count vs multi-index width",
            expected: mset.m(),
            found: model.n_uncertainties(),
        });
    }
    Ok(())
}
