//! Shared fixtures for the criterion benchmarks.

use stgrape_core::model::{attach_uncertainties, build_spin_chain, mhz_to_rad_per_ns, random_grid, UncertaintyKind};
use stgrape_core::{AugmentedState, CMatrix, ControlGrid, MultiIndexSet, OpenSystemModel, C64};

pub struct Fixture {
    pub model: OpenSystemModel,
    pub mset: MultiIndexSet,
    pub grid: ControlGrid,
    pub rho0: CMatrix,
}

impl Fixture {
    /// Spin chain with edge uncertainties, 30 us lifetimes and a seeded random pulse.
    pub fn new(qubits: usize, order: usize, steps: usize, dt: f64) -> Self {
        let base = build_spin_chain(qubits, 30.0, 30.0, 30.0).expect("spin chain");
        let model = attach_uncertainties(base, UncertaintyKind::Edges).expect("uncertainties");
        let mset = MultiIndexSet::new(model.n_uncertainties(), order);
        let b = mhz_to_rad_per_ns(100.0);
        let grid = random_grid(model.n_controls(), steps, dt, vec![(-b, b); model.n_controls()], 7).expect("grid");
        let d = model.dim();
        let rho0 = CMatrix::from_fn(d, d, |a, c| if a == 0 && c == 0 { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) });
        Self { model, mset, grid, rho0 }
    }

    pub fn initial_state(&self) -> AugmentedState {
        AugmentedState::initial(&self.mset, &self.rho0)
    }
}
