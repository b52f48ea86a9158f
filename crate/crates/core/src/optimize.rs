//! GRAPE and ST-GRAPE: objective gradients, a box-constrained L-BFGS driver
//! and the periodic exact-objective monitor.
//!
//! Gradients are laid out like [`ControlGrid::amplitudes`], step-major with
//! index `k * channels + c`.

use std::collections::VecDeque;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedState, MultiIndexSet};
use crate::error::{Error, Result};
use crate::linalg::{gemm, trace_product, CMatrix, Op, ONE};
use crate::model::{ControlGrid, OpenSystemModel};
use crate::objective::{avg_j_tilde, costate_j, costate_j_tilde, robust_j, GateObjective, RobustStateObjective};
use crate::propagate::{Backend, PropagationConfig, Propagator};

/// Terminal objective of one trajectory.
#[derive(Clone, Debug)]
pub enum Terminal {
    /// Overlap with a block-penalty on every non-zero order.
    Robust(RobustStateObjective),
    /// Noise-averaged overlap to second order.
    Average { target: CMatrix, sigmas: Vec<f64> },
}

impl Terminal {
    pub fn value(&self, state: &AugmentedState, mset: &MultiIndexSet) -> Result<f64> {
        match self {
            Terminal::Robust(obj) => Ok(robust_j(state, obj)),
            Terminal::Average { target, sigmas } => avg_j_tilde(state, mset, target, sigmas),
        }
    }

    pub fn costate(&self, state: &AugmentedState, mset: &MultiIndexSet) -> Result<AugmentedState> {
        match self {
            Terminal::Robust(obj) => Ok(costate_j(state, obj)),
            Terminal::Average { target, sigmas } => costate_j_tilde(mset, target, sigmas),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub initial: CMatrix,
    pub weight: f64,
    pub terminal: Terminal,
}

/// Weighted sum of terminal objectives over independent trajectories.
#[derive(Clone, Debug)]
pub struct Task {
    pub trajectories: Vec<Trajectory>,
}

impl Task {
    pub fn state_prep(initial: CMatrix, objective: RobustStateObjective) -> Self {
        Self {
            trajectories: vec![Trajectory {
                initial,
                weight: 1.0,
                terminal: Terminal::Robust(objective),
            }],
        }
    }

    pub fn averaged(initial: CMatrix, target: CMatrix, sigmas: Vec<f64>) -> Self {
        Self {
            trajectories: vec![Trajectory {
                initial,
                weight: 1.0,
                terminal: Terminal::Average { target, sigmas },
            }],
        }
    }

    pub fn gate(gobj: &GateObjective) -> Self {
        Self {
            trajectories: gobj
                .initial_states
                .iter()
                .zip(&gobj.weights)
                .zip(&gobj.terms)
                .map(|((r, w), t)| Trajectory {
                    initial: r.clone(),
                    weight: *w,
                    terminal: Terminal::Robust(t.clone()),
                })
                .collect(),
        }
    }
}

impl From<&GateObjective> for Task {
    fn from(g: &GateObjective) -> Self {
        Task::gate(g)
    }
}

/// How each trajectory's gradient is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// First-order GRAPE gradient on an exact backend.
    Grape(Backend),
    /// Exact gradient of the Trotterized objective.
    StGrape,
}

/// Runs `f` on every trajectory, in parallel when asked, keeping index order.
fn per_trajectory<T: Send>(task: &Task, parallel: bool, f: impl Fn(&Trajectory) -> Result<T> + Sync) -> Result<Vec<T>> {
    if parallel {
        task.trajectories.par_iter().map(&f).collect()
    } else {
        task.trajectories.iter().map(&f).collect()
    }
}

fn reduce(parts: Vec<(f64, Vec<f64>)>, task: &Task, len: usize) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; len];
    for ((v, g), t) in parts.into_iter().zip(&task.trajectories) {
        value += t.weight * v;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += t.weight * b;
        }
    }
    (value, grad)
}

/// Objective value on `backend` without gradients.
pub fn evaluate(
    backend: Backend,
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid: &ControlGrid,
    task: &Task,
    cfg: &PropagationConfig,
) -> Result<f64> {
    let prop = Propagator::new(backend, model, mset, grid, cfg)?;
    let values = per_trajectory(task, true, |t| {
        let (fin, _) = prop.forward(&AugmentedState::initial(mset, &t.initial), false)?;
        t.terminal.value(&fin, mset)
    })?;
    Ok(values.iter().zip(&task.trajectories).map(|(v, t)| t.weight * v).sum())
}

/// `sum_blocks (sigma O^dag - O^dag sigma)`, so that `<O, -i[H, sigma]> = -i tr(H K)`.
fn k_matrix(state: &AugmentedState, costate: &AugmentedState) -> CMatrix {
    let d = state.dim();
    let mut k = CMatrix::zeros(d, d);
    for (s, o) in state.blocks.iter().zip(&costate.blocks) {
        gemm(ONE, s, Op::None, o, Op::Adjoint, ONE, &mut k);
        gemm(-ONE, o, Op::Adjoint, s, Op::None, ONE, &mut k);
    }
    k
}

fn control_derivative(h: &CMatrix, k: &CMatrix, scale: f64) -> f64 {
    // Re(-i z) = Im z
    scale * trace_product(h, k).im
}

fn grape_trajectory(prop: &Propagator, mset: &MultiIndexSet, t: &Trajectory) -> Result<(f64, Vec<f64>)> {
    let model = prop.model();
    let grid = prop.grid();
    let (fin, cache) = prop.forward(&AugmentedState::initial(mset, &t.initial), true)?;
    let value = t.terminal.value(&fin, mset)?;
    let costates = prop.backward(&t.terminal.costate(&fin, mset)?)?;
    let states = cache.expect("recorded forward pass").states;
    let nc = model.n_controls();
    let mut grad = vec![0.0; grid.steps() * nc];
    for k in 0..grid.steps() {
        let kk = k_matrix(&states[k + 1], &costates[k + 1]);
        for (c, h) in model.controls().iter().enumerate() {
            grad[k * nc + c] = control_derivative(h, &kk, grid.dt());
        }
    }
    Ok((value, grad))
}

/// Objective and first-order GRAPE gradient on an exact backend.
pub fn grape_gradient(
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid: &ControlGrid,
    task: &Task,
    backend: Backend,
    cfg: &PropagationConfig,
    parallel: bool,
) -> Result<(f64, Vec<f64>)> {
    if !backend.is_exact() {
        return Err(Error::InvalidParameter(format!("GRAPE needs an exact backend, got {backend}")));
    }
    let prop = Propagator::new(backend, model, mset, grid, cfg)?;
    let parts = per_trajectory(task, parallel, |t| grape_trajectory(&prop, mset, t))?;
    Ok(reduce(parts, task, grid.amplitudes().len()))
}

fn conj_blocks(u: &CMatrix, s: &AugmentedState, adjoint: bool) -> AugmentedState {
    AugmentedState {
        blocks: s
            .blocks
            .iter()
            .map(|b| if adjoint { b.conjugate_by_adjoint(u) } else { b.conjugate_by(u) })
            .collect(),
    }
}

fn stgrape_trajectory(prop: &Propagator, mset: &MultiIndexSet, t: &Trajectory) -> Result<(f64, Vec<f64>)> {
    let model = prop.model();
    let grid = prop.grid();
    let plan = prop.trotter_plan().expect("Trotter propagator");
    let (fin, cache) = prop.forward(&AugmentedState::initial(mset, &t.initial), true)?;
    let value = t.terminal.value(&fin, mset)?;
    let costates = prop.backward(&t.terminal.costate(&fin, mset)?)?;
    let cache = cache.expect("recorded forward pass");
    let nc = model.n_controls();
    let half = 0.5 * grid.dt();
    let groups = plan.groups();
    let mut grad = vec![0.0; grid.steps() * nc];
    for k in 0..grid.steps() {
        let factors = prop.group_factors(k).expect("Trotter factors");
        let (m, first) = plan.middle(factors);
        let s1 = &cache.intra[k][0];
        let g = &mut grad[k * nc..(k + 1) * nc];
        let mut add = |q: usize, sigma: &AugmentedState, lambda: &AugmentedState| {
            let kk = k_matrix(sigma, lambda);
            for &c in &groups[q].channels {
                g[c] += control_derivative(&model.controls()[c], &kk, half);
            }
        };
        // second control factor, W_1 applied last
        let mut lambda = plan.post_adjoint(model, mset, &costates[k + 1]);
        let mut sigma = conj_blocks(&m, s1, false);
        for (q, w) in factors.iter().enumerate() {
            add(q, &sigma, &lambda);
            sigma = conj_blocks(w, &sigma, true);
            lambda = conj_blocks(w, &lambda, true);
        }
        // first control factor, W_Q applied last
        lambda = conj_blocks(plan.u_eff(), &lambda, true);
        sigma = conj_blocks(&first, s1, false);
        for (q, w) in factors.iter().enumerate().rev() {
            add(q, &sigma, &lambda);
            if q > 0 {
                sigma = conj_blocks(w, &sigma, true);
                lambda = conj_blocks(w, &lambda, true);
            }
        }
    }
    Ok((value, grad))
}

/// Trotterized objective and its exact gradient.
pub fn stgrape_gradient(
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid: &ControlGrid,
    task: &Task,
    cfg: &PropagationConfig,
    parallel: bool,
) -> Result<(f64, Vec<f64>)> {
    let prop = Propagator::new(Backend::Trotter, model, mset, grid, cfg)?;
    let parts = per_trajectory(task, parallel, |t| stgrape_trajectory(&prop, mset, t))?;
    Ok(reduce(parts, task, grid.amplitudes().len()))
}

/// Objective and gradient for `method`.
pub fn objective_and_gradient(
    method: Method,
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid: &ControlGrid,
    task: &Task,
    cfg: &PropagationConfig,
    parallel: bool,
) -> Result<(f64, Vec<f64>)> {
    match method {
        Method::Grape(b) => grape_gradient(model, mset, grid, task, b, cfg, parallel),
        Method::StGrape => stgrape_gradient(model, mset, grid, task, cfg, parallel),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub lbfgs_memory: usize,
    /// Iterations between exact-objective checkpoints (ST-GRAPE only).
    pub monitor_interval: usize,
    /// Step length of the projected-gradient fallback.
    pub alpha: f64,
    /// Stop once the projected gradient's infinity norm falls below this.
    pub gradient_tolerance: f64,
    /// Stop once the objective reaches `1 - objective_tolerance`.
    pub objective_tolerance: f64,
    pub seed: u64,
    /// Evaluate trajectories on the rayon pool.
    pub parallel: bool,
    /// Iterations between progress lines.
    pub log_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            lbfgs_memory: 10,
            monitor_interval: 50,
            alpha: 1e-3,
            gradient_tolerance: 1e-8,
            objective_tolerance: 1e-10,
            seed: 0,
            parallel: true,
            log_every: 10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.monitor_interval == 0 {
            return Err(Error::InvalidParameter("monitor_interval must be at least 1".into()));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::InvalidParameter("lbfgs_memory must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidParameter("alpha must be positive".into()));
        }
        if !(self.gradient_tolerance >= 0.0) || !(self.objective_tolerance >= 0.0) {
            return Err(Error::InvalidParameter("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MonitorDecrease,
    MaxIters,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub objective: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    /// Forward, backward and gradient evaluations.
    pub gradient_s: f64,
    /// Quasi-Newton algebra and projections.
    pub update_s: f64,
    /// Exact-objective checkpoints.
    pub monitor_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    /// Objective optimized by the loop, one entry per accepted iterate starting with the initial guess.
    pub history: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub best_control: Vec<f64>,
    /// Objective of `best_control`; the exact-backend value when checkpoints exist.
    pub best_objective: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub timings: PhaseTimings,
    pub seed: u64,
}

/// Limited-memory curvature pairs.
#[derive(Clone, Debug, Default)]
pub struct LbfgsHistory {
    memory: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl LbfgsHistory {
    pub fn new(memory: usize) -> Self {
        Self {
            memory: memory.max(1),
            pairs: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stores `(s, y)` unless the curvature condition `s.y > 0` fails. Returns whether it was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE)) {
            return false;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    /// Two-loop recursion: approximate inverse Hessian times `g`.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        q
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Infinity norm of the projected gradient `x - P(x - g)`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((xi, gi), (l, h))| (xi - (xi - gi).clamp(*l, *h)).abs())
        .fold(0.0, f64::max)
}

/// Result of one bounded quasi-Newton step on a minimization problem.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    /// Whether the projected-gradient fallback produced the step.
    pub fallback: bool,
}

const ARMIJO: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 40;

/// Value and gradient of a function of the flat control vector.
pub type ValueAndGradient<'a> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

/// Exact objective evaluated at checkpoints.
pub type Monitor<'a> = dyn FnMut(&[f64]) -> Result<f64> + 'a;

/// One projected L-BFGS step with Armijo backtracking on the projected path.
/// `eval` returns the value and gradient of the function being minimized.
/// Returns `Ok(None)` when neither the quasi-Newton nor the fallback step decreases `f`.
#[allow(clippy::too_many_arguments)]
pub fn lbfgs_bounded_step(
    history: &mut LbfgsHistory,
    eval: &mut ValueAndGradient<'_>,
    x: &[f64],
    f: f64,
    g: &[f64],
    lo: &[f64],
    hi: &[f64],
    alpha: f64,
) -> Result<Option<StepOutcome>> {
    let mut dir: Vec<f64> = history.apply(g).iter().map(|v| -v).collect();
    if history.is_empty() {
        let gn = dot(g, g).sqrt();
        if gn > 0.0 {
            dir.iter_mut().for_each(|v| *v /= gn.max(1.0));
        }
    }
    // freeze coordinates pinned at a bound and pushed outward
    for i in 0..x.len() {
        if (x[i] <= lo[i] && dir[i] < 0.0) || (x[i] >= hi[i] && dir[i] > 0.0) {
            dir[i] = 0.0;
        }
    }
    if dot(&dir, g) >= 0.0 {
        dir = g.iter().map(|v| -v).collect();
    }
    let mut accepted = None;
    let mut step = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
        project(&mut trial, lo, hi);
        let moved: Vec<f64> = trial.iter().zip(x).map(|(a, b)| a - b).collect();
        let decrease = dot(g, &moved);
        if decrease >= 0.0 {
            step *= BACKTRACK;
            continue;
        }
        let (ft, gt) = eval(&trial)?;
        if ft.is_finite() && ft <= f + ARMIJO * decrease {
            accepted = Some(StepOutcome {
                x: trial,
                f: ft,
                g: gt,
                fallback: false,
            });
            break;
        }
        step *= BACKTRACK;
    }
    if accepted.is_none() {
        let mut trial: Vec<f64> = x.iter().zip(g).map(|(a, d)| a - alpha * d).collect();
        project(&mut trial, lo, hi);
        if trial.as_slice() != x {
            let (ft, gt) = eval(&trial)?;
            if ft.is_finite() && ft < f {
                accepted = Some(StepOutcome {
                    x: trial,
                    f: ft,
                    g: gt,
                    fallback: true,
                });
            }
        }
    }
    if let Some(out) = &accepted {
        let s: Vec<f64> = out.x.iter().zip(x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = out.g.iter().zip(g).map(|(a, b)| a - b).collect();
        history.push(s, y);
    }
    Ok(accepted)
}

/// Maximizes `eval` over the box `[lo, hi]`, calling `monitor` at iteration 0
/// and every `monitor_interval` iterations, plus once at the end.
///
/// The monitor returns the exact objective of the current iterate. On the
/// first checkpoint that is lower than its predecessor the loop stops and the
/// best checkpoint's control is returned.
pub fn maximize_bounded(
    eval: &mut ValueAndGradient<'_>,
    x0: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    cfg: &OptimizerConfig,
    mut monitor: Option<&mut Monitor<'_>>,
) -> Result<OptimizationReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut timings = PhaseTimings::default();
    let mut timed_eval = |x: &[f64], t: &mut PhaseTimings| -> Result<(f64, Vec<f64>)> {
        let t0 = Instant::now();
        let (v, g) = eval(x)?;
        t.gradient_s += t0.elapsed().as_secs_f64();
        if !v.is_finite() || g.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("objective"));
        }
        Ok((-v, g.into_iter().map(|z| -z).collect()))
    };

    let mut x = x0;
    project(&mut x, lo, hi);
    let (mut f, mut g) = timed_eval(&x, &mut timings)?;
    let mut history = vec![-f];
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut checkpoint_controls: Vec<Vec<f64>> = Vec::new();
    let mut lbfgs = LbfgsHistory::new(cfg.lbfgs_memory);
    let mut stop = StopReason::MaxIters;
    let mut iter = 0;

    let mut check = |iter: usize, x: &[f64], cps: &mut Vec<Checkpoint>, ctl: &mut Vec<Vec<f64>>, t: &mut PhaseTimings| -> Result<bool> {
        let Some(m) = monitor.as_mut() else { return Ok(false) };
        if cps.last().is_some_and(|c| c.iteration == iter) {
            return Ok(false);
        }
        let t0 = Instant::now();
        let value = m(x)?;
        t.monitor_s += t0.elapsed().as_secs_f64();
        log::info!("checkpoint iter {iter}: exact objective {value:.10}");
        let decreased = cps.last().is_some_and(|c| value < c.objective);
        cps.push(Checkpoint { iteration: iter, objective: value });
        ctl.push(x.to_vec());
        Ok(decreased)
    };

    if check(0, &x, &mut checkpoints, &mut checkpoint_controls, &mut timings)? {
        stop = StopReason::MonitorDecrease;
    }
    while stop == StopReason::MaxIters && iter < cfg.max_iters {
        if -f >= 1.0 - cfg.objective_tolerance || projected_gradient_norm(&x, &g, lo, hi) <= cfg.gradient_tolerance {
            stop = StopReason::Converged;
            break;
        }
        let t0 = Instant::now();
        let eval_before = timings.gradient_s;
        let mut inner = |z: &[f64]| timed_eval(z, &mut timings);
        let out = lbfgs_bounded_step(&mut lbfgs, &mut inner, &x, f, &g, lo, hi, cfg.alpha)?;
        timings.update_s += t0.elapsed().as_secs_f64() - (timings.gradient_s - eval_before);
        let Some(out) = out else {
            stop = StopReason::Converged;
            break;
        };
        x = out.x;
        f = out.f;
        g = out.g;
        iter += 1;
        history.push(-f);
        if cfg.log_every > 0 && iter % cfg.log_every == 0 {
            log::info!("iter {iter}: objective {:.10}", -f);
        }
        if iter % cfg.monitor_interval == 0 && check(iter, &x, &mut checkpoints, &mut checkpoint_controls, &mut timings)? {
            stop = StopReason::MonitorDecrease;
        }
    }
    if stop != StopReason::MonitorDecrease && check(iter, &x, &mut checkpoints, &mut checkpoint_controls, &mut timings)? {
        stop = StopReason::MonitorDecrease;
    }

    let (best_control, best_objective) = if checkpoints.is_empty() {
        (x, -f)
    } else {
        let (i, c) = checkpoints
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.objective.total_cmp(&b.1.objective))
            .expect("non-empty");
        (checkpoint_controls.swap_remove(i), c.objective)
    };
    timings.total_s = start.elapsed().as_secs_f64();
    Ok(OptimizationReport {
        history,
        checkpoints,
        best_control,
        best_objective,
        iterations: iter,
        stop_reason: stop,
        timings,
        seed: cfg.seed,
    })
}

/// GRAPE on an exact backend.
pub fn run_grape(
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid0: &ControlGrid,
    task: &Task,
    cfg: &OptimizerConfig,
    backend: Backend,
    prop_cfg: &PropagationConfig,
) -> Result<OptimizationReport> {
    run(Method::Grape(backend), model, mset, grid0, task, cfg, prop_cfg)
}

/// Exact backend used for ST-GRAPE checkpoints: the dense exponential when it
/// fits under the cap, the ODE integrator otherwise.
pub fn monitor_backend(model: &OpenSystemModel, mset: &MultiIndexSet, prop_cfg: &PropagationConfig) -> Backend {
    let dim = mset.len() * model.dim() * model.dim();
    if dim <= prop_cfg.cap {
        Backend::Expm
    } else {
        log::warn!("augmented dimension {dim} exceeds the cap; checkpoints use the ODE backend");
        Backend::Ode
    }
}

/// ST-GRAPE with the periodic exact-objective monitor.
pub fn run_stgrape(
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid0: &ControlGrid,
    task: &Task,
    cfg: &OptimizerConfig,
    prop_cfg: &PropagationConfig,
) -> Result<OptimizationReport> {
    run(Method::StGrape, model, mset, grid0, task, cfg, prop_cfg)
}

/// Gate synthesis over the basis states of `gobj`; trajectories run on the
/// rayon pool when `cfg.parallel` is set.
pub fn run_gate_synthesis(
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid0: &ControlGrid,
    gobj: &GateObjective,
    cfg: &OptimizerConfig,
    method: Method,
    prop_cfg: &PropagationConfig,
) -> Result<OptimizationReport> {
    run(method, model, mset, grid0, &Task::gate(gobj), cfg, prop_cfg)
}

fn run(
    method: Method,
    model: &OpenSystemModel,
    mset: &MultiIndexSet,
    grid0: &ControlGrid,
    task: &Task,
    cfg: &OptimizerConfig,
    prop_cfg: &PropagationConfig,
) -> Result<OptimizationReport> {
    if task.trajectories.is_empty() {
        return Err(Error::InvalidParameter("task has no trajectories".into()));
    }
    let mut grid = grid0.clone();
    let (lo, hi) = grid.flat_bounds();
    let mut eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        grid.set_amplitudes(x)?;
        objective_and_gradient(method, model, mset, &grid, task, prop_cfg, cfg.parallel)
    };
    match method {
        Method::Grape(_) => maximize_bounded(&mut eval, grid0.amplitudes().to_vec(), &lo, &hi, cfg, None),
        Method::StGrape => {
            let exact = monitor_backend(model, mset, prop_cfg);
            let mut mgrid = grid0.clone();
            let mut monitor = |x: &[f64]| -> Result<f64> {
                mgrid.set_amplitudes(x)?;
                evaluate(exact, model, mset, &mgrid, task, prop_cfg)
            };
            maximize_bounded(&mut eval, grid0.amplitudes().to_vec(), &lo, &hi, cfg, Some(&mut monitor))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{pauli, C64, ZERO};
    use crate::model::{attach_uncertainties, build_spin_chain, mhz_to_rad_per_ns, random_grid, Lindblad, UncertaintyKind};
    use crate::objective::{prepared_state, unitary_preset, BasisKind};
    use proptest::prelude::*;

    fn pure(d: usize, i: usize) -> CMatrix {
        CMatrix::from_fn(d, d, |a, b| if a == i && b == i { ONE } else { ZERO })
    }

    fn bounds(n: usize) -> Vec<(f64, f64)> {
        let b = mhz_to_rad_per_ns(100.0);
        vec![(-b, b); n]
    }

    fn fd_gradient(grid: &ControlGrid, h: f64, f: impl Fn(&ControlGrid) -> f64) -> Vec<f64> {
        (0..grid.amplitudes().len())
            .map(|i| {
                let mut a = grid.amplitudes().to_vec();
                a[i] += h;
                let p = f(&grid.clone().with_amplitudes(a.clone()).unwrap());
                a[i] -= 2.0 * h;
                let m = f(&grid.clone().with_amplitudes(a).unwrap());
                (p - m) / (2.0 * h)
            })
            .collect()
    }

    fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        num / b.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    fn robust_task(model: &OpenSystemModel, mset: &MultiIndexSet, lambda: f64) -> Task {
        let d = model.dim();
        let target = prepared_state(&unitary_preset("hadamard_transform", d.trailing_zeros() as usize).unwrap());
        Task::state_prep(pure(d, 0), RobustStateObjective::uniform(mset, target, lambda).unwrap())
    }

    #[test]
    fn zero_costate_gives_zero_gradient() {
        let m = build_spin_chain(1, 30.0, 1.0, 1.0).unwrap();
        let s = MultiIndexSet::new(0, 0);
        let grid = random_grid(2, 5, 0.5, bounds(2), 1).unwrap();
        let zero = Task::state_prep(
            pure(2, 0),
            RobustStateObjective {
                target: CMatrix::zeros(2, 2),
                weights: vec![0.0],
            },
        );
        let cfg = PropagationConfig::default();
        for method in [Method::Grape(Backend::Expm), Method::StGrape] {
            let (_, g) = objective_and_gradient(method, &m, &s, &grid, &zero, &cfg, false).unwrap();
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn grape_rejects_trotter_backend() {
        let m = build_spin_chain(1, 30.0, 1.0, 1.0).unwrap();
        let s = MultiIndexSet::new(0, 0);
        let grid = random_grid(2, 5, 0.5, bounds(2), 1).unwrap();
        let t = robust_task(&m, &s, 0.0);
        assert!(grape_gradient(&m, &s, &grid, &t, Backend::Trotter, &PropagationConfig::default(), false).is_err());
    }

    #[test]
    fn stgrape_gradient_matches_finite_differences() {
        let m = attach_uncertainties(build_spin_chain(2, 30.0, 1.0, 0.5).unwrap(), UncertaintyKind::Edges).unwrap();
        let s = MultiIndexSet::new(2, 2);
        let grid = random_grid(4, 6, 0.5, bounds(4), 7).unwrap();
        let t = robust_task(&m, &s, 0.3);
        let cfg = PropagationConfig::default();
        let (_, g) = stgrape_gradient(&m, &s, &grid, &t, &cfg, false).unwrap();
        let fd = fd_gradient(&grid, 1e-6, |gr| evaluate(Backend::Trotter, &m, &s, gr, &t, &cfg).unwrap());
        let err = rel_inf(&g, &fd);
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn stgrape_gradient_generic_groups() {
        // three mutually non-commuting controls
        let drift = pauli::z().scaled(C64::new(0.2, 0.0));
        let controls = vec![pauli::x(), pauli::y(), pauli::z()];
        let m = OpenSystemModel::new(
            drift,
            controls,
            vec![Lindblad {
                op: pauli::lower(),
                rate: 0.05,
            }],
            vec![pauli::z()],
        )
        .unwrap();
        let s = MultiIndexSet::new(1, 1);
        let grid = random_grid(3, 5, 0.5, vec![(-1.0, 1.0); 3], 3).unwrap();
        let target = prepared_state(&unitary_preset("hadamard_transform", 1).unwrap());
        let t = Task::state_prep(pure(2, 0), RobustStateObjective::uniform(&s, target, 0.5).unwrap());
        let cfg = PropagationConfig::default();
        let (_, g) = stgrape_gradient(&m, &s, &grid, &t, &cfg, false).unwrap();
        let fd = fd_gradient(&grid, 1e-6, |gr| evaluate(Backend::Trotter, &m, &s, gr, &t, &cfg).unwrap());
        assert!(rel_inf(&g, &fd) < 1e-7, "{}", rel_inf(&g, &fd));
    }

    #[test]
    fn grape_gradient_error_is_first_order() {
        let m = build_spin_chain(1, 30.0, 5.0, 5.0).unwrap();
        let s = MultiIndexSet::new(0, 0);
        let t = robust_task(&m, &s, 0.0);
        let cfg = PropagationConfig::default();
        let coarse = random_grid(2, 10, 0.5, bounds(2), 4).unwrap();
        let err_at = |factor: usize| {
            let amps: Vec<f64> = (0..coarse.steps() * factor)
                .flat_map(|k| coarse.step(k / factor).to_vec())
                .collect();
            let grid = ControlGrid::new(coarse.dt() / factor as f64, coarse.steps() * factor, 2, bounds(2))
                .unwrap()
                .with_amplitudes(amps)
                .unwrap();
            let (_, g) = grape_gradient(&m, &s, &grid, &t, Backend::Expm, &cfg, false).unwrap();
            let fd = fd_gradient(&grid, 1e-6, |gr| evaluate(Backend::Expm, &m, &s, gr, &t, &cfg).unwrap());
            rel_inf(&g, &fd)
        };
        let (e1, e2) = (err_at(1), err_at(2));
        let ratio = e1 / e2;
        assert!((1.6..=2.4).contains(&ratio), "{e1} {e2} ratio {ratio}");
    }

    #[test]
    fn commuting_limit_agrees() {
        let m = OpenSystemModel::new(pauli::z().scaled(C64::new(0.3, 0.0)), vec![pauli::z()], vec![], vec![]).unwrap();
        let s = MultiIndexSet::new(0, 0);
        let plus = CMatrix::from_real_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let target = CMatrix::from_rows(&[&[C64::new(0.5, 0.0), C64::new(0.0, -0.5)], &[C64::new(0.0, 0.5), C64::new(0.5, 0.0)]]);
        let t = Task::state_prep(plus, RobustStateObjective::uniform(&s, target, 0.0).unwrap());
        let grid = random_grid(1, 100, 0.01, vec![(-1.0, 1.0)], 8).unwrap();
        let cfg = PropagationConfig::default();
        let (_, a) = grape_gradient(&m, &s, &grid, &t, Backend::Expm, &cfg, false).unwrap();
        let (_, b) = stgrape_gradient(&m, &s, &grid, &t, &cfg, false).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn quadratic_bowl() {
        let mut eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0] - 1.0, x[1] + 2.0);
            Ok((-(3.0 * a * a + 0.5 * b * b + a * b), vec![-(6.0 * a + b), -(b + a)]))
        };
        let cfg = OptimizerConfig {
            max_iters: 20,
            objective_tolerance: 0.0,
            gradient_tolerance: 1e-12,
            ..Default::default()
        };
        let inf = f64::INFINITY;
        let r = maximize_bounded(&mut eval, vec![5.0, 5.0], &[-inf, -inf], &[inf, inf], &cfg, None).unwrap();
        assert!((r.best_control[0] - 1.0).abs() < 1e-10 && (r.best_control[1] + 2.0).abs() < 1e-10, "{:?}", r);
        assert!(r.iterations <= 20);
        assert_eq!(r.stop_reason, StopReason::Converged);
    }

    #[test]
    fn active_bound_lands_on_face() {
        let mut eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((-((x[0] - 3.0).powi(2) + x[1].powi(2)), vec![-2.0 * (x[0] - 3.0), -2.0 * x[1]]))
        };
        let cfg = OptimizerConfig::default();
        let r = maximize_bounded(&mut eval, vec![0.0, 0.5], &[-1.0, -1.0], &[1.0, 1.0], &cfg, None).unwrap();
        assert_eq!(r.best_control[0], 1.0);
        assert!(r.best_control[1].abs() < 1e-8);
    }

    #[test]
    fn already_optimal_returns_immediately() {
        let mut eval = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((1.0 - 1e-12, vec![1e-3])) };
        let r = maximize_bounded(&mut eval, vec![0.0], &[-1.0], &[1.0], &OptimizerConfig::default(), None).unwrap();
        assert_eq!(r.stop_reason, StopReason::Converged);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn x_gate_closed_system() {
        let m = build_spin_chain(1, 30.0, 1.0, 1.0).unwrap().without_lindblads();
        let s = MultiIndexSet::new(0, 0);
        let x = pauli::x();
        let gobj = GateObjective::new(&s, x, BasisKind::DPlusOne, 0.0).unwrap();
        let grid = random_grid(2, 20, 0.5, bounds(2), 11).unwrap();
        let cfg = OptimizerConfig {
            max_iters: 200,
            ..Default::default()
        };
        let r = run_gate_synthesis(&m, &s, &grid, &gobj, &cfg, Method::Grape(Backend::Expm), &PropagationConfig::default()).unwrap();
        assert!(r.best_objective >= 0.999, "{}", r.best_objective);
        for w in r.history.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let (lo, hi) = grid.flat_bounds();
        assert!(r.best_control.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| l <= v && v <= h));
    }

    #[test]
    fn serial_and_parallel_gradients_identical() {
        let m = attach_uncertainties(build_spin_chain(2, 30.0, 30.0, 30.0).unwrap(), UncertaintyKind::Edges).unwrap();
        let s = MultiIndexSet::new(2, 1);
        let gobj = GateObjective::new(&s, unitary_preset("cnot", 2).unwrap(), BasisKind::DPlusOne, 1e-3).unwrap();
        let t = Task::gate(&gobj);
        let grid = random_grid(4, 8, 0.5, bounds(4), 2).unwrap();
        let cfg = PropagationConfig::default();
        for method in [Method::Grape(Backend::Expm), Method::StGrape] {
            let a = objective_and_gradient(method, &m, &s, &grid, &t, &cfg, false).unwrap();
            let b = objective_and_gradient(method, &m, &s, &grid, &t, &cfg, true).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn monitor_best_is_exact_value() {
        let m = attach_uncertainties(build_spin_chain(1, 30.0, 30.0, 30.0).unwrap(), UncertaintyKind::Edges).unwrap();
        let s = MultiIndexSet::new(1, 1);
        let t = robust_task(&m, &s, 1e-3);
        let grid = random_grid(2, 10, 1.0, bounds(2), 5).unwrap();
        let cfg = OptimizerConfig {
            max_iters: 30,
            monitor_interval: 5,
            ..Default::default()
        };
        let pc = PropagationConfig::default();
        let r = run_stgrape(&m, &s, &grid, &t, &cfg, &pc).unwrap();
        assert!(!r.checkpoints.is_empty());
        for w in r.checkpoints.windows(2) {
            assert!(w[1].iteration > w[0].iteration);
        }
        let best = r.checkpoints.iter().map(|c| c.objective).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_objective, best);
        let g = grid.clone().with_amplitudes(r.best_control.clone()).unwrap();
        let exact = evaluate(Backend::Expm, &m, &s, &g, &t, &pc).unwrap();
        assert!((exact - r.best_objective).abs() < 1e-12);
    }

    #[test]
    fn coarse_steps_trigger_monitor() {
        let m = build_spin_chain(2, 30.0, 30.0, 30.0).unwrap();
        let s = MultiIndexSet::new(0, 0);
        let gobj = GateObjective::new(&s, unitary_preset("cnot", 2).unwrap(), BasisKind::DPlusOne, 0.0).unwrap();
        let t = Task::gate(&gobj);
        let pc = PropagationConfig::default();
        // near-optimal start: converge on the exact objective first
        let fine = random_grid(4, 10, 2.0, bounds(4), 9).unwrap();
        let warm = run_grape(
            &m,
            &s,
            &fine,
            &t,
            &OptimizerConfig {
                max_iters: 150,
                parallel: false,
                ..Default::default()
            },
            Backend::Expm,
            &pc,
        )
        .unwrap();
        let start = fine.clone().with_amplitudes(warm.best_control.clone()).unwrap();
        let cfg = OptimizerConfig {
            max_iters: 100,
            monitor_interval: 5,
            parallel: false,
            ..Default::default()
        };
        let r = run_stgrape(&m, &s, &start, &t, &cfg, &pc).unwrap();
        assert_eq!(r.stop_reason, StopReason::MonitorDecrease, "{:?}", r.checkpoints);
        let n = r.checkpoints.len();
        assert!(r.checkpoints[n - 1].objective < r.checkpoints[n - 2].objective);
        assert_eq!(r.best_objective, r.checkpoints[n - 2].objective);
    }

    #[test]
    fn averaged_objective_gradient() {
        let m = attach_uncertainties(build_spin_chain(1, 30.0, 1.0, 1.0).unwrap(), UncertaintyKind::Edges).unwrap();
        let s = MultiIndexSet::new(1, 2);
        let target = prepared_state(&unitary_preset("hadamard_transform", 1).unwrap());
        let t = Task::averaged(pure(2, 0), target, vec![mhz_to_rad_per_ns(2.0)]);
        let grid = random_grid(2, 6, 0.5, bounds(2), 6).unwrap();
        let cfg = PropagationConfig::default();
        let (v, g) = stgrape_gradient(&m, &s, &grid, &t, &cfg, false).unwrap();
        assert!(v.is_finite());
        let fd = fd_gradient(&grid, 1e-6, |gr| evaluate(Backend::Trotter, &m, &s, gr, &t, &cfg).unwrap());
        assert!(rel_inf(&g, &fd) < 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn stgrape_exact_random(seed in 0u64..1000, qubits in 1usize..=2, n in 0usize..=2, lambda in 0.0f64..1.0) {
            let m = attach_uncertainties(build_spin_chain(qubits, 30.0, 0.5, 0.5).unwrap(), UncertaintyKind::Edges).unwrap();
            let s = MultiIndexSet::new(m.n_uncertainties(), n);
            let grid = random_grid(2 * qubits, 4, 0.5, bounds(2 * qubits), seed).unwrap();
            let t = robust_task(&m, &s, lambda);
            let cfg = PropagationConfig::default();
            let (_, g) = stgrape_gradient(&m, &s, &grid, &t, &cfg, false).unwrap();
            let fd = fd_gradient(&grid, 1e-6, |gr| evaluate(Backend::Trotter, &m, &s, gr, &t, &cfg).unwrap());
            prop_assert!(rel_inf(&g, &fd) < 1e-7);
        }

        #[test]
        fn iterates_stay_in_box(seed in 0u64..1000) {
            let m = build_spin_chain(1, 30.0, 1.0, 1.0).unwrap();
            let s = MultiIndexSet::new(0, 0);
            let t = robust_task(&m, &s, 0.0);
            let tight = vec![(-0.05, 0.02); 2];
            let grid = random_grid(2, 6, 0.5, tight.clone(), seed).unwrap();
            let pc = PropagationConfig::default();
            let mut g = grid.clone();
            let mut seen = Vec::new();
            let mut eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
                seen.push(x.to_vec());
                g.set_amplitudes(x)?;
                grape_gradient(&m, &s, &g, &t, Backend::Expm, &pc, false)
            };
            let (lo, hi) = grid.flat_bounds();
            let cfg = OptimizerConfig { max_iters: 15, ..Default::default() };
            maximize_bounded(&mut eval, grid.amplitudes().to_vec(), &lo, &hi, &cfg, None).unwrap();
            for x in seen {
                prop_assert!(x.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| l <= v && v <= h));
            }
        }
    }
}
