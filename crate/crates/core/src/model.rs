//! Controlled open systems, uncertainty operators and pulse grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{embed, pauli, CMatrix};

const HERMITIAN_TOL: f64 = 1e-12;

/// MHz to rad/ns.
pub fn mhz_to_rad_per_ns(f_mhz: f64) -> f64 {
    2.0 * std::f64::consts::PI * f_mhz * 1e-3
}

/// rad/ns to MHz.
pub fn rad_per_ns_to_mhz(w: f64) -> f64 {
    w * 1e3 / (2.0 * std::f64::consts::PI)
}

/// Decay rate in 1/ns for a lifetime given in microseconds.
pub fn rate_from_us(t_us: f64) -> f64 {
    1.0 / (t_us * 1e3)
}

/// Piecewise-constant amplitudes on a uniform grid, stored step-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    dt: f64,
    steps: usize,
    channels: usize,
    amplitudes: Vec<f64>,
    bounds: Vec<(f64, f64)>,
}

impl ControlGrid {
    pub fn new(dt: f64, steps: usize, channels: usize, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if bounds.len() != channels {
            return Err(Error::DimensionMismatch {
                context: "control bounds",
                expected: channels,
                found: bounds.len(),
            });
        }
        for &(lo, hi) in &bounds {
            if !(lo <= hi) {
                return Err(Error::InvalidParameter(format!("empty bound interval [{lo}, {hi}]")));
            }
        }
        let amplitudes = bounds
            .iter()
            .map(|&(lo, hi)| 0.0f64.clamp(lo, hi))
            .cycle()
            .take(channels * steps)
            .collect();
        Ok(Self {
            dt,
            steps,
            channels,
            amplitudes,
            bounds,
        })
    }

    pub fn with_amplitudes(mut self, amplitudes: Vec<f64>) -> Result<Self> {
        self.set_amplitudes(&amplitudes)?;
        Ok(self)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// Flattened amplitudes, index `k * channels + c`.
    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.amplitudes[k * self.channels..(k + 1) * self.channels]
    }

    pub fn get(&self, channel: usize, step: usize) -> f64 {
        self.amplitudes[step * self.channels + channel]
    }

    /// Replaces all amplitudes; values must lie inside the bounds.
    pub fn set_amplitudes(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.amplitudes.len() {
            return Err(Error::DimensionMismatch {
                context: "control amplitudes",
                expected: self.amplitudes.len(),
                found: values.len(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            let (lo, hi) = self.bounds[i % self.channels];
            if !(lo..=hi).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "amplitude {v} of channel {} outside [{lo}, {hi}]",
                    i % self.channels
                )));
            }
        }
        self.amplitudes.copy_from_slice(values);
        Ok(())
    }

    /// Clamps `values` into the box, channel by channel.
    pub fn project(&self, values: &mut [f64]) {
        for (i, v) in values.iter_mut().enumerate() {
            let (lo, hi) = self.bounds[i % self.channels];
            *v = v.clamp(lo, hi);
        }
    }

    /// Flattened lower and upper bounds matching [`Self::amplitudes`].
    pub fn flat_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = (0..self.amplitudes.len()).map(|i| self.bounds[i % self.channels].0).collect();
        let hi = (0..self.amplitudes.len()).map(|i| self.bounds[i % self.channels].1).collect();
        (lo, hi)
    }
}

/// Uniform random initial guess in the central 20% of each channel's box.
pub fn random_grid(
    channels: usize,
    steps: usize,
    dt: f64,
    bounds: Vec<(f64, f64)>,
    seed: u64,
) -> Result<ControlGrid> {
    for &(lo, hi) in &bounds {
        if !(lo < hi) {
            return Err(Error::InvalidParameter(format!("bounds need lo < hi, got [{lo}, {hi}]")));
        }
    }
    let grid = ControlGrid::new(dt, steps, channels, bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..channels * steps)
        .map(|i| {
            let (lo, hi) = grid.bounds[i % channels];
            rng.gen_range(0.2 * lo..=0.2 * hi)
        })
        .collect();
    grid.with_amplitudes(values)
}

/// A Lindblad jump operator with its rate in 1/ns.
#[derive(Clone, Debug)]
pub struct Lindblad {
    pub op: CMatrix,
    pub rate: f64,
}

/// Structural hint used to pick closed-form diagonalizers for the controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Generic,
    /// Controls are `[x_1, y_1, x_2, y_2, ...]` on a chain of qubits.
    SpinChain { qubits: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    /// `sigma_x` on the first and last qubit.
    Edges,
    /// Edges plus the XX+YY couplings on the first two bonds.
    Couplings,
}

#[derive(Clone, Debug)]
pub struct OpenSystemModel {
    dim: usize,
    drift: CMatrix,
    controls: Vec<CMatrix>,
    lindblads: Vec<Lindblad>,
    uncertainties: Vec<CMatrix>,
    layout: Layout,
}

impl OpenSystemModel {
    pub fn new(
        drift: CMatrix,
        controls: Vec<CMatrix>,
        lindblads: Vec<Lindblad>,
        uncertainties: Vec<CMatrix>,
    ) -> Result<Self> {
        if !drift.is_square() {
            return Err(Error::NotSquare {
                rows: drift.rows(),
                cols: drift.cols(),
            });
        }
        let dim = drift.rows();
        let check_shape = |m: &CMatrix, context: &'static str| -> Result<()> {
            if m.rows() != dim || m.cols() != dim {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: dim,
                    found: if m.rows() != dim { m.rows() } else { m.cols() },
                });
            }
            Ok(())
        };
        let check_herm = |m: &CMatrix, what: &str| -> Result<()> {
            if !m.is_hermitian(HERMITIAN_TOL) {
                return Err(Error::InvalidParameter(format!("{what} is not Hermitian")));
            }
            Ok(())
        };
        check_herm(&drift, "drift Hamiltonian")?;
        for h in &controls {
            check_shape(h, "control Hamiltonian")?;
            check_herm(h, "control Hamiltonian")?;
        }
        for l in &lindblads {
            check_shape(&l.op, "Lindblad operator")?;
            if !(l.rate >= 0.0) || !l.rate.is_finite() {
                return Err(Error::InvalidParameter(format!("negative or non-finite rate {}", l.rate)));
            }
        }
        for e in &uncertainties {
            check_shape(e, "uncertainty operator")?;
            check_herm(e, "uncertainty operator")?;
        }
        Ok(Self {
            dim,
            drift,
            controls,
            lindblads,
            uncertainties,
            layout: Layout::Generic,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self) -> &CMatrix {
        &self.drift
    }

    pub fn controls(&self) -> &[CMatrix] {
        &self.controls
    }

    pub fn lindblads(&self) -> &[Lindblad] {
        &self.lindblads
    }

    pub fn uncertainties(&self) -> &[CMatrix] {
        &self.uncertainties
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn n_uncertainties(&self) -> usize {
        self.uncertainties.len()
    }

    /// Qubit count for spin-chain models.
    pub fn qubits(&self) -> Option<usize> {
        match self.layout {
            Layout::SpinChain { qubits } => Some(qubits),
            Layout::Generic => None,
        }
    }

    pub fn with_uncertainties(mut self, uncertainties: Vec<CMatrix>) -> Result<Self> {
        let layout = self.layout;
        let rebuilt = Self::new(self.drift, self.controls, self.lindblads, uncertainties)?;
        self = rebuilt;
        self.layout = layout;
        Ok(self)
    }

    pub fn without_lindblads(&self) -> Self {
        let mut out = self.clone();
        out.lindblads.clear();
        out
    }

    /// `H_S = H_0 + sum_c u_c H_c`.
    pub fn system_hamiltonian(&self, amplitudes: &[f64]) -> Result<CMatrix> {
        if amplitudes.len() != self.controls.len() {
            return Err(Error::DimensionMismatch {
                context: "amplitudes per step",
                expected: self.controls.len(),
                found: amplitudes.len(),
            });
        }
        let mut h = self.drift.clone();
        for (hc, &u) in self.controls.iter().zip(amplitudes) {
            h.axpy(crate::linalg::C64::new(u, 0.0), hc);
        }
        Ok(h)
    }

    /// `H_S + sum_j eps_j E_j`.
    pub fn perturbed_hamiltonian(&self, amplitudes: &[f64], eps: &[f64]) -> Result<CMatrix> {
        if eps.len() != self.uncertainties.len() {
            return Err(Error::DimensionMismatch {
                context: "uncertainty parameters",
                expected: self.uncertainties.len(),
                found: eps.len(),
            });
        }
        let mut h = self.system_hamiltonian(amplitudes)?;
        for (e, &x) in self.uncertainties.iter().zip(eps) {
            h.axpy(crate::linalg::C64::new(x, 0.0), e);
        }
        Ok(h)
    }
}

/// XX+YY chain with per-qubit x/y drives, amplitude damping and `|1><1|` dephasing.
pub fn build_spin_chain(n_q: usize, jxy_over_2pi_mhz: f64, t1_us: f64, t2_us: f64) -> Result<OpenSystemModel> {
    if n_q == 0 {
        return Err(Error::InvalidParameter("spin chain needs at least one qubit".into()));
    }
    if !(t1_us > 0.0) || !(t2_us > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "coherence times must be positive, got T1={t1_us}, T2={t2_us}"
        )));
    }
    let dim = 1usize << n_q;
    let (sx, sy) = (pauli::x(), pauli::y());
    let jxy = mhz_to_rad_per_ns(jxy_over_2pi_mhz);

    let mut drift = CMatrix::zeros(dim, dim);
    for i in 0..n_q.saturating_sub(1) {
        drift += &embed(&[(i, &sx), (i + 1, &sx)], n_q);
        drift += &embed(&[(i, &sy), (i + 1, &sy)], n_q);
    }
    drift.scale_mut(crate::linalg::C64::new(jxy, 0.0));

    let mut controls = Vec::with_capacity(2 * n_q);
    for i in 0..n_q {
        controls.push(embed(&[(i, &sx)], n_q));
        controls.push(embed(&[(i, &sy)], n_q));
    }

    let excited = &pauli::raise() * &pauli::lower();
    let (g1, g2) = (rate_from_us(t1_us), rate_from_us(t2_us));
    let mut lindblads = Vec::with_capacity(2 * n_q);
    for i in 0..n_q {
        lindblads.push(Lindblad {
            op: embed(&[(i, &pauli::lower())], n_q),
            rate: g1,
        });
        lindblads.push(Lindblad {
            op: embed(&[(i, &excited)], n_q),
            rate: g2,
        });
    }

    let mut model = OpenSystemModel::new(drift, controls, lindblads, Vec::new())?;
    model.layout = Layout::SpinChain { qubits: n_q };
    Ok(model)
}

/// Adds the spin-chain uncertainty operators of the requested kind.
pub fn attach_uncertainties(model: OpenSystemModel, kind: UncertaintyKind) -> Result<OpenSystemModel> {
    let n_q = model
        .qubits()
        .ok_or_else(|| Error::InvalidParameter("uncertainty presets need a spin-chain model".into()))?;
    let sx = pauli::x();
    let sy = pauli::y();
    let mut ops = vec![embed(&[(0, &sx)], n_q)];
    if n_q > 1 {
        ops.push(embed(&[(n_q - 1, &sx)], n_q));
    }
    if kind == UncertaintyKind::Couplings {
        if n_q < 3 {
            return Err(Error::InvalidParameter(format!(
                "coupling uncertainties need at least 3 qubits, got {n_q}"
            )));
        }
        for i in 0..2 {
            let mut e = embed(&[(i, &sx), (i + 1, &sx)], n_q);
            e += &embed(&[(i, &sy), (i + 1, &sy)], n_q);
            ops.push(e);
        }
    }
    model.with_uncertainties(ops)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Normal,
    Uniform,
}

/// Independent zero-mean noise on each uncertainty parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDistribution {
    pub kind: NoiseKind,
    /// Standard deviation per parameter in rad/ns.
    pub sigmas: Vec<f64>,
    pub seed: u64,
}

impl NoiseDistribution {
    pub fn new(kind: NoiseKind, sigmas: Vec<f64>, seed: u64) -> Result<Self> {
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter("noise scales must be finite and non-negative".into()));
        }
        Ok(Self { kind, sigmas, seed })
    }

    /// `count` parameter tuples; uniform samples use half-width `sqrt(3) sigma`
    /// so both kinds share the variance `sigma^2`.
    pub fn sample(&self, count: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let half = 3f64.sqrt();
        (0..count)
            .map(|_| {
                self.sigmas
                    .iter()
                    .map(|&s| match self.kind {
                        NoiseKind::Normal => s * normal.sample(&mut rng),
                        NoiseKind::Uniform => s * rng.gen_range(-half..=half),
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{commutator, kron, C64};
    use proptest::prelude::*;

    #[test]
    fn two_qubit_drift_couples_01_and_10() {
        let m = build_spin_chain(2, 30.0, 30.0, 30.0).unwrap();
        let j = 2.0 * std::f64::consts::PI * 0.03;
        let h = m.drift();
        assert!((h[(1, 2)] - C64::new(2.0 * j, 0.0)).norm() < 1e-15);
        assert!((h[(2, 1)] - C64::new(2.0 * j, 0.0)).norm() < 1e-15);
        for (i, k) in [(0, 0), (0, 3), (3, 0), (1, 1), (2, 2), (3, 3), (0, 1)] {
            assert!(h[(i, k)].norm() < 1e-15, "({i},{k})");
        }
    }

    #[test]
    fn rates_from_microseconds() {
        let m = build_spin_chain(1, 30.0, 30.0, 60.0).unwrap();
        assert!((m.lindblads()[0].rate - 1.0 / 30000.0).abs() < 1e-20);
        assert!((m.lindblads()[1].rate - 1.0 / 60000.0).abs() < 1e-20);
        let excited = &m.lindblads()[1].op;
        assert_eq!(excited[(1, 1)], C64::new(1.0, 0.0));
        assert_eq!(m.lindblads()[0].op[(0, 1)], C64::new(1.0, 0.0));
    }

    #[test]
    fn three_qubits_have_six_channels() {
        let m = build_spin_chain(3, 30.0, 30.0, 30.0).unwrap();
        assert_eq!(m.dim(), 8);
        assert_eq!(m.n_controls(), 6);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_spin_chain(0, 30.0, 30.0, 30.0).is_err());
        assert!(build_spin_chain(2, 30.0, 0.0, 30.0).is_err());
        assert!(build_spin_chain(2, 30.0, 30.0, -1.0).is_err());
    }

    #[test]
    fn edge_uncertainties() {
        let m = attach_uncertainties(build_spin_chain(2, 30.0, 30.0, 30.0).unwrap(), UncertaintyKind::Edges).unwrap();
        assert_eq!(m.n_uncertainties(), 2);
        let id = CMatrix::identity(2);
        assert_eq!(m.uncertainties()[0], kron(&pauli::x(), &id));
        assert_eq!(m.uncertainties()[1], kron(&id, &pauli::x()));
    }

    #[test]
    fn coupling_uncertainties() {
        let base = build_spin_chain(3, 30.0, 30.0, 30.0).unwrap();
        let m = attach_uncertainties(base, UncertaintyKind::Couplings).unwrap();
        assert_eq!(m.n_uncertainties(), 4);
        for e in m.uncertainties() {
            assert!(e.is_hermitian(1e-15));
            assert!(e.trace().norm() < 1e-15);
        }
        let small = build_spin_chain(2, 30.0, 30.0, 30.0).unwrap();
        assert!(attach_uncertainties(small, UncertaintyKind::Couplings).is_err());
    }

    #[test]
    fn single_qubit_edges_collapse_to_one_operator() {
        let m = attach_uncertainties(build_spin_chain(1, 30.0, 30.0, 30.0).unwrap(), UncertaintyKind::Edges).unwrap();
        assert_eq!(m.n_uncertainties(), 1);
    }

    #[test]
    fn same_kind_controls_commute() {
        let m = build_spin_chain(3, 30.0, 30.0, 30.0).unwrap();
        let c = m.controls();
        for a in 0..c.len() {
            for b in 0..c.len() {
                if a % 2 == b % 2 {
                    assert!(commutator(&c[a], &c[b]).frobenius_norm() < 1e-12);
                }
            }
            assert!(c[a].is_hermitian(1e-12));
        }
        assert!(m.drift().is_hermitian(1e-12));
    }

    #[test]
    fn random_grid_is_seeded_and_windowed() {
        let b = mhz_to_rad_per_ns(100.0);
        let bounds = vec![(-b, b); 2];
        let g1 = random_grid(2, 80, 0.5, bounds.clone(), 7).unwrap();
        let g2 = random_grid(2, 80, 0.5, bounds.clone(), 7).unwrap();
        assert_eq!(g1, g2);
        assert_ne!(g1, random_grid(2, 80, 0.5, bounds, 8).unwrap());
        assert!((g1.duration() - 40.0).abs() < 1e-12);
        assert!(g1.amplitudes().iter().all(|a| a.abs() <= 0.2 * b));
        assert!((b - 2.0 * std::f64::consts::PI * 0.1).abs() < 1e-15);
    }

    #[test]
    fn grid_rejects_out_of_bounds() {
        let g = ControlGrid::new(1.0, 2, 1, vec![(-1.0, 1.0)]).unwrap();
        assert!(g.clone().with_amplitudes(vec![0.5, 2.0]).is_err());
        assert!(g.with_amplitudes(vec![0.5]).is_err());
        assert!(ControlGrid::new(0.0, 2, 1, vec![(-1.0, 1.0)]).is_err());
    }

    #[test]
    fn uniform_noise_shares_variance_with_normal() {
        let count = 40_000;
        for kind in [NoiseKind::Normal, NoiseKind::Uniform] {
            let d = NoiseDistribution::new(kind, vec![0.3], 1).unwrap();
            let s = d.sample(count);
            let mean = s.iter().map(|e| e[0]).sum::<f64>() / count as f64;
            let var = s.iter().map(|e| (e[0] - mean).powi(2)).sum::<f64>() / count as f64;
            assert!(mean.abs() < 4.0 * 0.3 / (count as f64).sqrt());
            assert!((var - 0.09).abs() < 0.004, "{kind:?}: {var}");
        }
    }

    proptest! {
        #[test]
        fn unit_round_trip(f in -1e4f64..1e4) {
            let back = rad_per_ns_to_mhz(mhz_to_rad_per_ns(f));
            prop_assert!((back - f).abs() <= 1e-15 * f.abs().max(1e-300));
        }
    }
}
