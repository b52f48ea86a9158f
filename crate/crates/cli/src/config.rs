//! Run configuration: parsing, validation and construction of core objects.
//!
//! Frequencies are given in MHz (`f`, meaning `omega / 2 pi`) and converted to
//! rad/ns internally; times are in ns except coherence times, which are in us.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stgrape_core::model::{
    attach_uncertainties, build_spin_chain, mhz_to_rad_per_ns, random_grid, NoiseKind, UncertaintyKind,
};
use stgrape_core::objective::{gate_basis_states, prepared_state, unitary_preset, BasisKind};
use stgrape_core::optimize::{Method, Terminal, Trajectory};
use stgrape_core::timing::BenchmarkSpec;
use stgrape_core::{
    Backend, CMatrix, ControlGrid, MultiIndexSet, OpenSystemModel, OptimizerConfig, PropagationConfig,
    RobustStateObjective, Task, C64,
};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub system: Option<SystemSection>,
    pub control: Option<ControlSection>,
    #[serde(default)]
    pub robustness: RobustnessSection,
    pub task: Option<TaskSection>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    #[serde(default)]
    pub propagation: PropagationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub qubits: usize,
    #[serde(default = "default_jxy")]
    pub jxy_mhz: f64,
    #[serde(default = "default_coherence")]
    pub t1_us: f64,
    #[serde(default = "default_coherence")]
    pub t2_us: f64,
    #[serde(default)]
    pub uncertainty: UncertaintyChoice,
}

fn default_jxy() -> f64 {
    30.0
}

fn default_coherence() -> f64 {
    30.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyChoice {
    None,
    #[default]
    Edges,
    Couplings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub dt_ns: f64,
    pub steps: usize,
    #[serde(default = "default_bound")]
    pub bound_mhz: f64,
}

fn default_bound() -> f64 {
    100.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSection {
    /// Truncation order `n`.
    pub order: usize,
    /// Penalty weight for every non-zero order unless `lambda_by_order` is set.
    pub lambda: f64,
    /// Penalty weight per total order `1..=n`.
    pub lambda_by_order: Option<Vec<f64>>,
    /// Noise scale per uncertainty operator in MHz, used by averaged objectives and sweeps.
    pub sigmas_mhz: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    StatePrep,
    #[default]
    Gate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Overlap with penalties on the higher-order blocks.
    #[default]
    Robust,
    /// Noise-averaged overlap to second order.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Gate preset, or the unitary whose action on `|0...0>` gives the target state.
    pub target: Option<String>,
    /// Explicit target unitary as rows of `[re, im]` pairs.
    pub matrix: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default = "default_basis")]
    pub basis: BasisKind,
    #[serde(default)]
    pub objective: ObjectiveKind,
}

fn default_basis() -> BasisKind {
    BasisKind::DPlusOne
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    #[default]
    Grape,
    Stgrape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub method: MethodChoice,
    /// Exact backend for GRAPE.
    pub backend: Backend,
    pub max_iters: usize,
    pub monitor_interval: usize,
    pub lbfgs_memory: usize,
    pub alpha: f64,
    pub gradient_tolerance: f64,
    pub objective_tolerance: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            method: MethodChoice::Grape,
            backend: Backend::Expm,
            max_iters: d.max_iters,
            monitor_interval: d.monitor_interval,
            lbfgs_memory: d.lbfgs_memory,
            alpha: d.alpha,
            gradient_tolerance: d.gradient_tolerance,
            objective_tolerance: d.objective_tolerance,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// `|0...0><0...0|`.
    Ground,
    /// All-ones matrix over `d`.
    #[default]
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub backends: Vec<Backend>,
    pub initial: InitialState,
    /// Pulse CSV to propagate; a seeded random pulse otherwise.
    pub pulse: Option<PathBuf>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            backends: vec![Backend::Expm, Backend::Trotter],
            initial: InitialState::Uniform,
            pulse: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub count: usize,
    pub distribution: NoiseKind,
    pub thresholds: Vec<f64>,
    /// Seed of the noise samples; the run seed when absent.
    pub noise_seed: Option<u64>,
    pub pulse: Option<PathBuf>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            count: 2000,
            distribution: NoiseKind::Normal,
            thresholds: vec![0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5],
            noise_seed: None,
            pulse: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn system(&self) -> Result<&SystemSection, CliError> {
        self.system.as_ref().ok_or_else(|| CliError::Config("missing field `system`".into()))
    }

    pub fn control(&self) -> Result<&ControlSection, CliError> {
        self.control.as_ref().ok_or_else(|| CliError::Config("missing field `control`".into()))
    }

    pub fn task(&self) -> Result<&TaskSection, CliError> {
        self.task.as_ref().ok_or_else(|| CliError::Config("missing field `task`".into()))
    }

    pub fn model(&self) -> Result<OpenSystemModel, CliError> {
        let s = self.system()?;
        if s.qubits == 0 || s.qubits > 8 {
            return Err(CliError::Config(format!("system.qubits must be in 1..=8, got {}", s.qubits)));
        }
        let base = build_spin_chain(s.qubits, s.jxy_mhz, s.t1_us, s.t2_us).map_err(|e| field("system", e))?;
        let model = match s.uncertainty {
            UncertaintyChoice::None => base,
            UncertaintyChoice::Edges => attach_uncertainties(base, UncertaintyKind::Edges).map_err(|e| field("system.uncertainty", e))?,
            UncertaintyChoice::Couplings => {
                attach_uncertainties(base, UncertaintyKind::Couplings).map_err(|e| field("system.uncertainty", e))?
            }
        };
        Ok(model)
    }

    pub fn mset(&self, model: &OpenSystemModel) -> Result<MultiIndexSet, CliError> {
        let n = self.robustness.order;
        if n > 0 && model.n_uncertainties() == 0 {
            return Err(CliError::Config("robustness.order > 0 needs system.uncertainty other than none".into()));
        }
        Ok(MultiIndexSet::new(model.n_uncertainties(), n))
    }

    /// Zero-amplitude grid with the configured bounds.
    pub fn empty_grid(&self, model: &OpenSystemModel) -> Result<ControlGrid, CliError> {
        let c = self.control()?;
        if !(c.dt_ns > 0.0) {
            return Err(CliError::Config(format!("control.dt_ns must be positive, got {}", c.dt_ns)));
        }
        if c.steps == 0 {
            return Err(CliError::Config("control.steps must be at least 1".into()));
        }
        if !(c.bound_mhz > 0.0) {
            return Err(CliError::Config(format!("control.bound_mhz must be positive, got {}", c.bound_mhz)));
        }
        let b = mhz_to_rad_per_ns(c.bound_mhz);
        ControlGrid::new(c.dt_ns, c.steps, model.n_controls(), vec![(-b, b); model.n_controls()]).map_err(|e| field("control", e))
    }

    /// Seeded random initial pulse.
    pub fn random_grid(&self, model: &OpenSystemModel) -> Result<ControlGrid, CliError> {
        let g = self.empty_grid(model)?;
        random_grid(g.channels(), g.steps(), g.dt(), g.bounds().to_vec(), self.seed).map_err(|e| field("control", e))
    }

    pub fn propagation(&self) -> Result<PropagationConfig, CliError> {
        let p = &self.propagation;
        if !(p.ode_threshold > 0.0) {
            return Err(CliError::Config("propagation.ode_threshold must be positive".into()));
        }
        if p.substeps == Some(0) {
            return Err(CliError::Config("propagation.substeps must be at least 1".into()));
        }
        Ok(p.clone())
    }

    pub fn optimizer(&self) -> Result<OptimizerConfig, CliError> {
        let o = &self.optimizer;
        let cfg = OptimizerConfig {
            max_iters: o.max_iters,
            lbfgs_memory: o.lbfgs_memory,
            monitor_interval: o.monitor_interval,
            alpha: o.alpha,
            gradient_tolerance: o.gradient_tolerance,
            objective_tolerance: o.objective_tolerance,
            seed: self.seed,
            parallel: true,
            log_every: 10,
        };
        cfg.validate().map_err(|e| field("optimizer", e))?;
        Ok(cfg)
    }

    pub fn method(&self) -> Result<Method, CliError> {
        match self.optimizer.method {
            MethodChoice::Grape if !self.optimizer.backend.is_exact() => Err(CliError::Config(
                "optimizer.backend must be expm or ode when optimizer.method = grape".into(),
            )),
            MethodChoice::Grape => Ok(Method::Grape(self.optimizer.backend)),
            MethodChoice::Stgrape => Ok(Method::StGrape),
        }
    }

    /// Noise scales in rad/ns, one per uncertainty operator.
    pub fn sigmas(&self, model: &OpenSystemModel) -> Result<Vec<f64>, CliError> {
        let s = &self.robustness.sigmas_mhz;
        if s.len() != model.n_uncertainties() {
            return Err(CliError::Config(format!(
                "robustness.sigmas_mhz needs {} entries, got {}",
                model.n_uncertainties(),
                s.len()
            )));
        }
        Ok(s.iter().map(|&x| mhz_to_rad_per_ns(x)).collect())
    }

    /// Per-block penalty weights from `lambda` or `lambda_by_order`.
    pub fn block_weights(&self, mset: &MultiIndexSet) -> Result<Vec<f64>, CliError> {
        let r = &self.robustness;
        match &r.lambda_by_order {
            Some(table) => {
                if table.len() != r.order {
                    return Err(CliError::Config(format!(
                        "robustness.lambda_by_order needs {} entries, got {}",
                        r.order,
                        table.len()
                    )));
                }
                Ok((0..mset.len())
                    .map(|k| match mset.degree(k) {
                        0 => 0.0,
                        deg => table[deg as usize - 1],
                    })
                    .collect())
            }
            None => Ok(vec![r.lambda; mset.len()]),
        }
    }

    pub fn target_unitary(&self, model: &OpenSystemModel) -> Result<CMatrix, CliError> {
        let t = self.task()?;
        let n_q = self.system()?.qubits;
        match (&t.target, &t.matrix) {
            (Some(name), None) => unitary_preset(name, n_q).map_err(|e| field("task.target", e)),
            (None, Some(rows)) => {
                let d = model.dim();
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(CliError::Config(format!("task.matrix must be {d}x{d}")));
                }
                let u = CMatrix::from_fn(d, d, |a, b| C64::new(rows[a][b][0], rows[a][b][1]));
                let uu = &u.dagger() * &u;
                if uu.max_abs_diff(&CMatrix::identity(d)) > 1e-10 {
                    return Err(CliError::Config("task.matrix is not unitary".into()));
                }
                Ok(u)
            }
            (None, None) => Err(CliError::Config("missing field `task.target` (or `task.matrix`)".into())),
            (Some(_), Some(_)) => Err(CliError::Config("task.target and task.matrix are mutually exclusive".into())),
        }
    }

    pub fn ground_state(model: &OpenSystemModel) -> CMatrix {
        let d = model.dim();
        CMatrix::from_fn(d, d, |a, b| if a == 0 && b == 0 { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) })
    }

    /// Optimization task described by the task and robustness blocks.
    pub fn build_task(&self, model: &OpenSystemModel, mset: &MultiIndexSet) -> Result<Task, CliError> {
        let t = self.task()?;
        let u = self.target_unitary(model)?;
        let initials: Vec<CMatrix> = match t.kind {
            TaskKind::StatePrep => vec![Self::ground_state(model)],
            TaskKind::Gate => gate_basis_states(model.dim(), t.basis).map_err(|e| field("task", e))?,
        };
        let w = 1.0 / initials.len() as f64;
        let weights = self.block_weights(mset)?;
        let sigmas = match t.objective {
            ObjectiveKind::Average => {
                if mset.n() < 2 {
                    return Err(CliError::Config("task.objective = average needs robustness.order >= 2".into()));
                }
                Some(self.sigmas(model)?)
            }
            ObjectiveKind::Robust => None,
        };
        let trajectories = initials
            .into_iter()
            .map(|r| {
                let target = r.conjugate_by(&u);
                let terminal = match &sigmas {
                    Some(s) => Terminal::Average {
                        target,
                        sigmas: s.clone(),
                    },
                    None => Terminal::Robust(RobustStateObjective::with_weights(mset, target, weights.clone()).map_err(|e| field("robustness", e))?),
                };
                Ok(Trajectory { initial: r, weight: w, terminal })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Task { trajectories })
    }

    pub fn target_state(&self, model: &OpenSystemModel) -> Result<CMatrix, CliError> {
        Ok(prepared_state(&self.target_unitary(model)?))
    }

    pub fn sweep_thresholds(&self) -> Result<Vec<f64>, CliError> {
        let t = &self.sweep.thresholds;
        if t.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(CliError::Config("sweep.thresholds must lie in [0, 1]".into()));
        }
        Ok(t.clone())
    }
}

fn field(name: &str, e: stgrape_core::Error) -> CliError {
    CliError::from_core(e, name)
}
