//! Forward and adjoint propagation of augmented states with three backends:
//! exact supermatrix exponentials, fixed-substep RK4 on block actions, and a
//! second-order Suzuki-Trotter product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_ej, apply_ej_adjoint, assemble_from_generator, check_order, AugmentedState, LindbladGenerator,
    MultiIndexSet, DEFAULT_SUPERMATRIX_CAP,
};
use crate::error::{Error, Result};
use crate::linalg::{
    commutator, eigh, expm, kron, product, CMatrix, Op, SparseOp, SparseSuperOp, C64, I, ONE,
};
use crate::model::{ControlGrid, Layout, OpenSystemModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Expm,
    Ode,
    Trotter,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Expm => "expm",
            Backend::Ode => "ode",
            Backend::Trotter => "trotter",
        }
    }

    pub fn is_exact(self) -> bool {
        !matches!(self, Backend::Trotter)
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expm" => Ok(Backend::Expm),
            "ode" => Ok(Backend::Ode),
            "trotter" => Ok(Backend::Trotter),
            other => Err(Error::InvalidParameter(format!("unknown backend '{other}'"))),
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the collapse term `rho -> sum gamma c rho c^dag` is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseMode {
    /// Sandwich products on each block.
    #[default]
    Direct,
    /// One sparse `d^2 x d^2` map holding the whole truncated factor.
    Vectorized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    /// Largest augmented supermatrix side the expm backend may assemble.
    pub cap: usize,
    /// Fixed RK4 substeps per interval; `None` picks them from a norm estimate.
    pub substeps: Option<usize>,
    /// Target for `h * ||generator||` when substeps are picked automatically.
    pub ode_threshold: f64,
    pub collapse: CollapseMode,
    /// Per-step exponentials are kept in memory while their total size stays below this.
    pub store_budget_bytes: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            cap: DEFAULT_SUPERMATRIX_CAP,
            substeps: None,
            ode_threshold: DEFAULT_ODE_THRESHOLD,
            collapse: CollapseMode::Direct,
            store_budget_bytes: 1 << 30,
        }
    }
}

pub const DEFAULT_ODE_THRESHOLD: f64 = 0.02;

/// Cheap upper bound on the norm of the block generator.
fn generator_norm_estimate(gen: &LindbladGenerator, model: &OpenSystemModel, mset: &MultiIndexSet) -> f64 {
    let mut est = 2.0 * gen.effective().norm_one();
    for l in model.lindblads() {
        est += l.rate * l.op.norm_one().powi(2);
    }
    if mset.n() > 0 {
        est += model.uncertainties().iter().map(|e| 2.0 * e.norm_one()).sum::<f64>();
    }
    est
}

fn auto_substeps(dt: f64, est: f64, threshold: f64) -> usize {
    ((dt * est / threshold).ceil() as usize).max(1)
}

fn conjugate(u: &CMatrix, rho: &CMatrix) -> CMatrix {
    let t = product(u, Op::None, rho, Op::None);
    product(&t, Op::None, u, Op::Adjoint)
}

fn conjugate_adjoint(u: &CMatrix, rho: &CMatrix) -> CMatrix {
    let t = product(u, Op::Adjoint, rho, Op::None);
    product(&t, Op::None, u, Op::None)
}

fn map_blocks(state: &AugmentedState, f: impl Fn(&CMatrix) -> CMatrix) -> AugmentedState {
    AugmentedState {
        blocks: state.blocks.iter().map(f).collect(),
    }
}

fn check_state(model: &OpenSystemModel, mset: &MultiIndexSet, state: &AugmentedState) -> Result<()> {
    check_order(model, mset)?;
    if state.len() != mset.len() {
        return Err(Error::DimensionMismatch {
            context: "augmented block count",
            expected: mset.len(),
            found: state.len(),
        });
    }
    if state.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "augmented block dimension",
            expected: model.dim(),
            found: state.dim(),
        });
    }
    Ok(())
}

fn apply_dense(p: &CMatrix, op: Op, state: &AugmentedState) -> Result<AugmentedState> {
    let n = state.len();
    let d = state.dim();
    let v = CMatrix::from_vec(n * d * d, 1, state.to_vec())?;
    let out = product(p, op, &v, Op::None);
    AugmentedState::from_vec(out.as_slice(), n, d)
}

/// Exponential of the assembled augmented generator over `dt`.
pub fn step_exponential(
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    amplitudes: &[f64],
    dt: f64,
    cap: usize,
) -> Result<CMatrix> {
    let gen = LindbladGenerator::new(model, amplitudes)?;
    let sup = assemble_from_generator(&gen, model, mset, cap)?;
    expm(&sup.scaled(C64::new(dt, 0.0)))
}

/// One interval of exact propagation through the assembled supermatrix.
pub fn step_expm(
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    amplitudes: &[f64],
    dt: f64,
    state: &AugmentedState,
    cap: usize,
) -> Result<AugmentedState> {
    check_state(model, mset, state)?;
    let p = step_exponential(model, mset, amplitudes, dt, cap)?;
    apply_dense(&p, Op::None, state)
}

fn block_rhs(
    gen: &LindbladGenerator,
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    s: &AugmentedState,
    adjoint: bool,
) -> AugmentedState {
    let mut out = if adjoint {
        map_blocks(s, |b| gen.apply_adjoint(b))
    } else {
        map_blocks(s, |b| gen.apply(b))
    };
    if mset.n() > 0 {
        for (j, e) in model.uncertainties().iter().enumerate() {
            let t = if adjoint {
                apply_ej_adjoint(j, e, mset, s)
            } else {
                apply_ej(j, e, mset, s)
            };
            out.axpy(ONE, &t);
        }
    }
    out
}

fn rk4(
    gen: &LindbladGenerator,
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    dt: f64,
    substeps: usize,
    state: &AugmentedState,
    adjoint: bool,
) -> AugmentedState {
    let h = dt / substeps as f64;
    let re = |x: f64| C64::new(x, 0.0);
    let mut s = state.clone();
    for _ in 0..substeps {
        let k1 = block_rhs(gen, model, mset, &s, adjoint);
        let mut t = s.clone();
        t.axpy(re(0.5 * h), &k1);
        let k2 = block_rhs(gen, model, mset, &t, adjoint);
        let mut t = s.clone();
        t.axpy(re(0.5 * h), &k2);
        let k3 = block_rhs(gen, model, mset, &t, adjoint);
        let mut t = s.clone();
        t.axpy(re(h), &k3);
        let k4 = block_rhs(gen, model, mset, &t, adjoint);
        s.axpy(re(h / 6.0), &k1);
        s.axpy(re(h / 3.0), &k2);
        s.axpy(re(h / 3.0), &k3);
        s.axpy(re(h / 6.0), &k4);
    }
    s
}

/// Classical RK4 over `substeps` equal substeps of the block right-hand side.
pub fn step_ode(
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    amplitudes: &[f64],
    dt: f64,
    state: &AugmentedState,
    substeps: usize,
) -> Result<AugmentedState> {
    check_state(model, mset, state)?;
    if substeps == 0 {
        return Err(Error::InvalidParameter("substeps must be at least 1".into()));
    }
    let gen = LindbladGenerator::new(model, amplitudes)?;
    Ok(rk4(&gen, model, mset, dt, substeps, state, false))
}

/// Default substep count for one interval.
pub fn default_substeps(model: &OpenSystemModel, mset: &MultiIndexSet, amplitudes: &[f64], dt: f64) -> Result<usize> {
    let gen = LindbladGenerator::new(model, amplitudes)?;
    Ok(auto_substeps(dt, generator_norm_estimate(&gen, model, mset), DEFAULT_ODE_THRESHOLD))
}

/// `exp(dt_half * E_j)` by the nested Horner loop; exact since `E_j^{n+1} = 0`.
pub fn exp_nilpotent(j: usize, e: &CMatrix, mset: &MultiIndexSet, state: &AugmentedState, dt_half: f64) -> AugmentedState {
    nested(mset.n(), state, dt_half, |s| apply_ej(j, e, mset, s))
}

/// `exp(dt_half * E_j^dag)`.
pub fn exp_nilpotent_adjoint(
    j: usize,
    e: &CMatrix,
    mset: &MultiIndexSet,
    state: &AugmentedState,
    dt_half: f64,
) -> AugmentedState {
    nested(mset.n(), state, dt_half, |s| apply_ej_adjoint(j, e, mset, s))
}

fn nested(n: usize, state: &AugmentedState, dt_half: f64, op: impl Fn(&AugmentedState) -> AugmentedState) -> AugmentedState {
    let mut acc = state.clone();
    for l in 0..n {
        let mut next = state.clone();
        next.axpy(C64::new(dt_half / (n - l) as f64, 0.0), &op(&acc));
        acc = next;
    }
    acc
}

/// Mutually commuting control channels with a shared diagonalizer `R`.
#[derive(Clone, Debug)]
pub struct ControlGroup {
    pub channels: Vec<usize>,
    /// Unitary `R` with `R^dag H_c R` diagonal for every channel in the group.
    pub rotation: CMatrix,
    /// Diagonal of `R^dag H_c R`, one row per channel.
    pub spectra: Vec<Vec<f64>>,
}

impl ControlGroup {
    /// `exp(-i tau sum_c u_c H_c)` for the channels of this group.
    pub fn unitary(&self, amplitudes: &[f64], tau: f64) -> CMatrix {
        let d = self.rotation.rows();
        let mut phase = vec![0.0; d];
        for (c, spec) in self.channels.iter().zip(&self.spectra) {
            let u = amplitudes[*c];
            for (p, &l) in phase.iter_mut().zip(spec) {
                *p += u * l;
            }
        }
        let mut scaled = self.rotation.clone();
        for i in 0..d {
            for (x, p) in scaled.row_mut(i).iter_mut().zip(&phase) {
                *x *= C64::from_polar(1.0, -tau * p);
            }
        }
        product(&scaled, Op::None, &self.rotation, Op::Adjoint)
    }
}

const COMMUTE_TOL: f64 = 1e-10;
const GROUP_SEED: u64 = 0x5eed_c0de;

/// Greedy commuting groups with diagonalizers from a random Hermitian combination.
pub fn generic_groups(controls: &[CMatrix]) -> Result<Vec<ControlGroup>> {
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (c, h) in controls.iter().enumerate() {
        let slot = members
            .iter()
            .position(|g| g.iter().all(|&o| commutator(h, &controls[o]).frobenius_norm() < COMMUTE_TOL));
        match slot {
            Some(q) => members[q].push(c),
            None => members.push(vec![c]),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(GROUP_SEED);
    members
        .into_iter()
        .map(|channels| {
            let d = controls[channels[0]].rows();
            let mut mix = CMatrix::zeros(d, d);
            for &c in &channels {
                mix.axpy(C64::new(rng.gen_range(0.5..1.5), 0.0), &controls[c]);
            }
            let (_, rotation) = eigh(&mix)?;
            let mut spectra = Vec::with_capacity(channels.len());
            for &c in &channels {
                let diag = controls[c].conjugate_by_adjoint(&rotation);
                let mut off = 0.0;
                for i in 0..d {
                    for k in 0..d {
                        if i != k {
                            off += diag[(i, k)].norm_sqr();
                        }
                    }
                }
                if off.sqrt() > 1e-10 {
                    return Err(Error::InvalidParameter(format!(
                        "control {c} is not diagonalized by its group's rotation"
                    )));
                }
                spectra.push((0..d).map(|i| diag[(i, i)].re).collect());
            }
            Ok(ControlGroup {
                channels,
                rotation,
                spectra,
            })
        })
        .collect()
}

/// Closed-form groups for a spin chain: all `sigma_x` drives share `R_x^{(x)N}`
/// and all `sigma_y` drives share `R_y^{(x)N}`.
pub fn spin_chain_groups(qubits: usize) -> Vec<ControlGroup> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let rx = CMatrix::from_real_rows(&[&[s, s], &[s, -s]]);
    let ry = CMatrix::from_rows(&[&[C64::new(s, 0.0), C64::new(s, 0.0)], &[C64::new(0.0, s), C64::new(0.0, -s)]]);
    let d = 1usize << qubits;
    let z_spectrum = |q: usize| -> Vec<f64> {
        (0..d)
            .map(|b| if (b >> (qubits - 1 - q)) & 1 == 0 { 1.0 } else { -1.0 })
            .collect()
    };
    [rx, ry]
        .into_iter()
        .enumerate()
        .map(|(kind, r)| {
            let mut rotation = r.clone();
            for _ in 1..qubits {
                rotation = kron(&rotation, &r);
            }
            ControlGroup {
                channels: (0..qubits).map(|q| 2 * q + kind).collect(),
                rotation,
                spectra: (0..qubits).map(z_spectrum).collect(),
            }
        })
        .collect()
}

/// Step-independent ingredients of the Suzuki-Trotter step.
#[derive(Clone, Debug)]
pub struct TrotterPlan {
    dt: f64,
    h_eff: CMatrix,
    u_eff: CMatrix,
    groups: Vec<ControlGroup>,
    jumps: Vec<(SparseOp, f64)>,
    collapse: CollapseMode,
    /// Truncated collapse factor and its adjoint, vectorized mode only.
    collapse_factor: Option<(SparseSuperOp, SparseSuperOp)>,
}

impl TrotterPlan {
    pub fn new(model: &OpenSystemModel, dt: f64, collapse: CollapseMode) -> Result<Self> {
        let groups = match model.layout() {
            Layout::SpinChain { qubits } if model.n_controls() == 2 * qubits => spin_chain_groups(qubits),
            _ => generic_groups(model.controls())?,
        };
        Self::with_groups(model, dt, collapse, groups)
    }

    /// Plan that always uses the eigendecomposition-based grouping.
    pub fn generic(model: &OpenSystemModel, dt: f64, collapse: CollapseMode) -> Result<Self> {
        Self::with_groups(model, dt, collapse, generic_groups(model.controls())?)
    }

    fn with_groups(model: &OpenSystemModel, dt: f64, collapse: CollapseMode, groups: Vec<ControlGroup>) -> Result<Self> {
        let drift_gen = LindbladGenerator::from_hamiltonian(model, model.drift().clone());
        let h_eff = drift_gen.effective().clone();
        let u_eff = expm(&h_eff.scaled(-I * dt))?;
        let jumps = drift_gen.jumps().to_vec();
        let collapse_factor = match collapse {
            CollapseMode::Vectorized if !jumps.is_empty() => {
                let sup = SparseSuperOp::collapse(&jumps);
                let fwd = sup.truncated_exp2(0.5 * dt);
                let adj = fwd.adjoint();
                Some((fwd, adj))
            }
            _ => None,
        };
        Ok(Self {
            dt,
            h_eff,
            u_eff,
            groups,
            jumps,
            collapse,
            collapse_factor,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn h_eff(&self) -> &CMatrix {
        &self.h_eff
    }

    pub fn u_eff(&self) -> &CMatrix {
        &self.u_eff
    }

    pub fn groups(&self) -> &[ControlGroup] {
        &self.groups
    }

    pub fn collapse_mode(&self) -> CollapseMode {
        self.collapse
    }

    /// Group unitaries `exp(-i (dt/2) sum_{c in q} u_c H_c)` in group order.
    pub fn group_unitaries(&self, amplitudes: &[f64]) -> Vec<CMatrix> {
        self.groups.iter().map(|g| g.unitary(amplitudes, 0.5 * self.dt)).collect()
    }

    /// Middle of the step as one matrix: the second control factor (groups in
    /// reverse order), the effective drift, and the first control factor.
    pub fn middle(&self, factors: &[CMatrix]) -> (CMatrix, CMatrix) {
        let mut first = CMatrix::identity(self.u_eff.rows());
        for w in factors {
            first = product(w, Op::None, &first, Op::None);
        }
        let mut m = product(&self.u_eff, Op::None, &first, Op::None);
        for w in factors.iter().rev() {
            m = product(w, Op::None, &m, Op::None);
        }
        (m, first)
    }

    fn collapse_block(&self, rho: &CMatrix, adjoint: bool) -> CMatrix {
        if let Some((fwd, adj)) = &self.collapse_factor {
            let mut out = CMatrix::zeros(rho.rows(), rho.cols());
            if adjoint {
                adj.add_apply(rho, &mut out);
            } else {
                fwd.add_apply(rho, &mut out);
            }
            return out;
        }
        let c = |x: &CMatrix| {
            let mut out = CMatrix::zeros(x.rows(), x.cols());
            for (op, w) in &self.jumps {
                if adjoint {
                    op.add_adjoint_sandwich(*w, x, &mut out);
                } else {
                    op.add_sandwich(*w, x, &mut out);
                }
            }
            out
        };
        let c1 = c(rho);
        let c2 = c(&c1);
        let mut out = rho.clone();
        out.axpy(C64::new(0.5 * self.dt, 0.0), &c1);
        out.axpy(C64::new(self.dt * self.dt / 8.0, 0.0), &c2);
        out
    }

    /// `rho + (dt/2) C rho + (dt^2/8) C^2 rho` on every block.
    pub fn collapse(&self, state: &AugmentedState) -> AugmentedState {
        if self.jumps.is_empty() {
            return state.clone();
        }
        map_blocks(state, |b| self.collapse_block(b, false))
    }

    pub fn collapse_adjoint(&self, state: &AugmentedState) -> AugmentedState {
        if self.jumps.is_empty() {
            return state.clone();
        }
        map_blocks(state, |b| self.collapse_block(b, true))
    }

    /// Factors applied before the first control factor: `E_m, ..., E_1`, then `C`.
    pub fn pre(&self, model: &OpenSystemModel, mset: &MultiIndexSet, state: &AugmentedState) -> AugmentedState {
        let mut s = state.clone();
        if mset.n() > 0 {
            for (j, e) in model.uncertainties().iter().enumerate().rev() {
                s = exp_nilpotent(j, e, mset, &s, 0.5 * self.dt);
            }
        }
        self.collapse(&s)
    }

    pub fn pre_adjoint(&self, model: &OpenSystemModel, mset: &MultiIndexSet, state: &AugmentedState) -> AugmentedState {
        let mut s = self.collapse_adjoint(state);
        if mset.n() > 0 {
            for (j, e) in model.uncertainties().iter().enumerate() {
                s = exp_nilpotent_adjoint(j, e, mset, &s, 0.5 * self.dt);
            }
        }
        s
    }

    /// Factors applied after the second control factor: `C`, then `E_1, ..., E_m`.
    pub fn post(&self, model: &OpenSystemModel, mset: &MultiIndexSet, state: &AugmentedState) -> AugmentedState {
        let mut s = self.collapse(state);
        if mset.n() > 0 {
            for (j, e) in model.uncertainties().iter().enumerate() {
                s = exp_nilpotent(j, e, mset, &s, 0.5 * self.dt);
            }
        }
        s
    }

    pub fn post_adjoint(&self, model: &OpenSystemModel, mset: &MultiIndexSet, state: &AugmentedState) -> AugmentedState {
        let mut s = state.clone();
        if mset.n() > 0 {
            for (j, e) in model.uncertainties().iter().enumerate().rev() {
                s = exp_nilpotent_adjoint(j, e, mset, &s, 0.5 * self.dt);
            }
        }
        self.collapse_adjoint(&s)
    }
}

/// One symmetric Suzuki-Trotter step.
pub fn step_trotter(
    plan: &TrotterPlan,
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    amplitudes: &[f64],
    state: &AugmentedState,
) -> Result<AugmentedState> {
    check_state(model, mset, state)?;
    if amplitudes.len() != model.n_controls() {
        return Err(Error::DimensionMismatch {
            context: "amplitudes per step",
            expected: model.n_controls(),
            found: amplitudes.len(),
        });
    }
    let (m, _) = plan.middle(&plan.group_unitaries(amplitudes));
    let s = plan.pre(model, mset, state);
    let s = map_blocks(&s, |b| conjugate(&m, b));
    Ok(plan.post(model, mset, &s))
}

/// Forward states on the time grid; the Trotter backend also keeps the two
/// states entering each control factor.
#[derive(Clone, Debug)]
pub struct StepCache {
    pub states: Vec<AugmentedState>,
    /// Per step: state before the first and before the second control factor.
    pub intra: Vec<[AugmentedState; 2]>,
}

enum StepData {
    Expm { stored: Option<Vec<CMatrix>> },
    Ode { gens: Vec<LindbladGenerator>, substeps: Vec<usize> },
    Trotter {
        plan: TrotterPlan,
        factors: Vec<Vec<CMatrix>>,
        middles: Vec<(CMatrix, CMatrix)>,
    },
}

/// Per-step propagation data for one control grid, shareable across
/// trajectories with different initial states.
pub struct Propagator<'a> {
    backend: Backend,
    model: &'a OpenSystemModel,
    mset: &'a MultiIndexSet,
    grid: &'a ControlGrid,
    cfg: PropagationConfig,
    data: StepData,
}

impl<'a> Propagator<'a> {
    pub fn new(
        backend: Backend,
        model: &'a OpenSystemModel,
        mset: &'a MultiIndexSet,
        grid: &'a ControlGrid,
        cfg: &PropagationConfig,
    ) -> Result<Self> {
        check_order(model, mset)?;
        if grid.channels() != model.n_controls() {
            return Err(Error::DimensionMismatch {
                context: "grid channels vs model controls",
                expected: model.n_controls(),
                found: grid.channels(),
            });
        }
        let dt = grid.dt();
        let data = match backend {
            Backend::Expm => {
                let side = mset.len() * model.dim() * model.dim();
                if side > cfg.cap {
                    return Err(Error::CapExceeded { dim: side, cap: cfg.cap });
                }
                let bytes = grid.steps().saturating_mul(side * side * 16);
                let stored = if bytes <= cfg.store_budget_bytes {
                    Some(
                        (0..grid.steps())
                            .map(|k| step_exponential(model, mset, grid.step(k), dt, cfg.cap))
                            .collect::<Result<Vec<_>>>()?,
                    )
                } else {
                    None
                };
                StepData::Expm { stored }
            }
            Backend::Ode => {
                let gens = (0..grid.steps())
                    .map(|k| LindbladGenerator::new(model, grid.step(k)))
                    .collect::<Result<Vec<_>>>()?;
                let substeps = gens
                    .iter()
                    .map(|g| match cfg.substeps {
                        Some(s) => s.max(1),
                        None => auto_substeps(dt, generator_norm_estimate(g, model, mset), cfg.ode_threshold),
                    })
                    .collect();
                StepData::Ode { gens, substeps }
            }
            Backend::Trotter => {
                let plan = TrotterPlan::new(model, dt, cfg.collapse)?;
                let factors: Vec<Vec<CMatrix>> = (0..grid.steps()).map(|k| plan.group_unitaries(grid.step(k))).collect();
                let middles = factors.iter().map(|f| plan.middle(f)).collect();
                StepData::Trotter { plan, factors, middles }
            }
        };
        Ok(Self {
            backend,
            model,
            mset,
            grid,
            cfg: cfg.clone(),
            data,
        })
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn model(&self) -> &OpenSystemModel {
        self.model
    }

    pub fn mset(&self) -> &MultiIndexSet {
        self.mset
    }

    pub fn grid(&self) -> &ControlGrid {
        self.grid
    }

    pub fn trotter_plan(&self) -> Option<&TrotterPlan> {
        match &self.data {
            StepData::Trotter { plan, .. } => Some(plan),
            _ => None,
        }
    }

    /// Group unitaries of step `k` (Trotter backend only).
    pub fn group_factors(&self, k: usize) -> Option<&[CMatrix]> {
        match &self.data {
            StepData::Trotter { factors, .. } => Some(&factors[k]),
            _ => None,
        }
    }

    /// Per-step RK4 substep counts (ODE backend only).
    pub fn substeps(&self) -> Option<&[usize]> {
        match &self.data {
            StepData::Ode { substeps, .. } => Some(substeps),
            _ => None,
        }
    }

    fn exponential(&self, k: usize) -> Result<std::borrow::Cow<'_, CMatrix>> {
        match &self.data {
            StepData::Expm { stored: Some(v) } => Ok(std::borrow::Cow::Borrowed(&v[k])),
            StepData::Expm { stored: None } => Ok(std::borrow::Cow::Owned(step_exponential(
                self.model,
                self.mset,
                self.grid.step(k),
                self.grid.dt(),
                self.cfg.cap,
            )?)),
            _ => unreachable!("exponential requested from a non-expm backend"),
        }
    }

    /// Applies step `k`; for Trotter also returns the two intra-step states.
    fn step_with_intra(&self, k: usize, state: &AugmentedState, keep: bool) -> Result<(AugmentedState, Option<[AugmentedState; 2]>)> {
        match &self.data {
            StepData::Expm { .. } => Ok((apply_dense(&*self.exponential(k)?, Op::None, state)?, None)),
            StepData::Ode { gens, substeps } => Ok((
                rk4(&gens[k], self.model, self.mset, self.grid.dt(), substeps[k], state, false),
                None,
            )),
            StepData::Trotter { plan, middles, .. } => {
                let (m, first) = &middles[k];
                let s1 = plan.pre(self.model, self.mset, state);
                let out = plan.post(self.model, self.mset, &map_blocks(&s1, |b| conjugate(m, b)));
                let intra = if keep {
                    let before_second = product(&plan.u_eff, Op::None, first, Op::None);
                    let s2 = map_blocks(&s1, |b| conjugate(&before_second, b));
                    Some([s1, s2])
                } else {
                    None
                };
                Ok((out, intra))
            }
        }
    }

    pub fn step(&self, k: usize, state: &AugmentedState) -> Result<AugmentedState> {
        Ok(self.step_with_intra(k, state, false)?.0)
    }

    /// Adjoint of step `k`.
    pub fn step_adjoint(&self, k: usize, costate: &AugmentedState) -> Result<AugmentedState> {
        match &self.data {
            StepData::Expm { .. } => apply_dense(&*self.exponential(k)?, Op::Adjoint, costate),
            StepData::Ode { gens, substeps } => Ok(rk4(
                &gens[k],
                self.model,
                self.mset,
                self.grid.dt(),
                substeps[k],
                costate,
                true,
            )),
            StepData::Trotter { plan, middles, .. } => {
                let (m, _) = &middles[k];
                let s = plan.post_adjoint(self.model, self.mset, costate);
                let s = map_blocks(&s, |b| conjugate_adjoint(m, b));
                Ok(plan.pre_adjoint(self.model, self.mset, &s))
            }
        }
    }

    /// Folds the step over the grid, optionally recording every state.
    pub fn forward(&self, state0: &AugmentedState, record: bool) -> Result<(AugmentedState, Option<StepCache>)> {
        check_state(self.model, self.mset, state0)?;
        let steps = self.grid.steps();
        let mut cache = record.then(|| StepCache {
            states: Vec::with_capacity(steps + 1),
            intra: Vec::new(),
        });
        let mut s = state0.clone();
        for k in 0..steps {
            let (next, intra) = self.step_with_intra(k, &s, record && self.backend == Backend::Trotter)?;
            if let Some(c) = cache.as_mut() {
                c.states.push(std::mem::replace(&mut s, next));
                if let Some(i) = intra {
                    c.intra.push(i);
                }
            } else {
                s = next;
            }
        }
        if !s.is_finite() {
            return Err(Error::NonFinite("propagated state"));
        }
        if let Some(c) = cache.as_mut() {
            c.states.push(s.clone());
        }
        Ok((s, cache))
    }

    /// Co-states `O(t_k)` for `k = 0..=N_T`, starting from `costate_t` at the final time.
    pub fn backward(&self, costate_t: &AugmentedState) -> Result<Vec<AugmentedState>> {
        check_state(self.model, self.mset, costate_t)?;
        let steps = self.grid.steps();
        let mut out = vec![costate_t.clone(); steps + 1];
        for k in (0..steps).rev() {
            out[k] = self.step_adjoint(k, &out[k + 1])?;
        }
        Ok(out)
    }
}

pub fn propagate_forward(
    backend: Backend,
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid: &ControlGrid,
    state0: &AugmentedState,
    record: bool,
    cfg: &PropagationConfig,
) -> Result<(AugmentedState, Option<StepCache>)> {
    Propagator::new(backend, model, mset, grid, cfg)?.forward(state0, record)
}

pub fn propagate_backward(
    backend: Backend,
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid: &ControlGrid,
    costate_t: &AugmentedState,
    cfg: &PropagationConfig,
) -> Result<Vec<AugmentedState>> {
    Propagator::new(backend, model, mset, grid, cfg)?.backward(costate_t)
}

/// Relative distance between two augmented states, block norms in quadrature.
pub fn relative_distance(reference: &AugmentedState, other: &AugmentedState) -> f64 {
    let mut diff = reference.clone();
    diff.axpy(-ONE, other);
    diff.frobenius_norm() / reference.frobenius_norm()
}

/// Relative Frobenius error of the Trotter final state against the exact one.
pub fn delta_st(
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid: &ControlGrid,
    state0: &AugmentedState,
    cfg: &PropagationConfig,
) -> Result<f64> {
    delta_st_against(Backend::Expm, model, mset, grid, state0, cfg)
}

/// [`delta_st`] with a chosen exact reference backend.
pub fn delta_st_against(
    reference: Backend,
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid: &ControlGrid,
    state0: &AugmentedState,
    cfg: &PropagationConfig,
) -> Result<f64> {
    if !reference.is_exact() {
        return Err(Error::InvalidParameter(format!("reference backend must be exact, got {reference}")));
    }
    let (exact, _) = propagate_forward(reference, model, mset, grid, state0, false, cfg)?;
    let (trot, _) = propagate_forward(Backend::Trotter, model, mset, grid, state0, false, cfg)?;
    Ok(relative_distance(&exact, &trot))
}
