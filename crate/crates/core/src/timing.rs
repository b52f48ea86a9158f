//! Per-step wall-clock sweep over chain length, robustness order and backend.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedState, MultiIndexSet};
use crate::error::{Error, Result};
use crate::linalg::{CMatrix, ONE, ZERO};
use crate::model::{attach_uncertainties, build_spin_chain, mhz_to_rad_per_ns, random_grid, UncertaintyKind};
use crate::propagate::{Backend, PropagationConfig, Propagator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub qubits: Vec<usize>,
    pub orders: Vec<usize>,
    pub backends: Vec<Backend>,
    /// Random controls timed per configuration.
    pub repeats: usize,
    pub dt: f64,
    pub jxy_mhz: f64,
    pub t1_us: f64,
    pub t2_us: f64,
    pub bound_mhz: f64,
    pub uncertainty: UncertaintyKind,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            qubits: vec![2, 3, 4, 5],
            orders: vec![0],
            backends: vec![Backend::Expm, Backend::Trotter],
            repeats: 10,
            dt: 0.5,
            jxy_mhz: 30.0,
            t1_us: 30.0,
            t2_us: 30.0,
            bound_mhz: 100.0,
            uncertainty: UncertaintyKind::Edges,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub backend: Backend,
    pub n_q: usize,
    pub n: usize,
    /// `N * d^2`.
    pub d_aug: usize,
    pub median_ns: f64,
    pub mean_ns: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times one forward step, including the per-step setup (exponential,
/// substep generators or Trotter factors), for `repeats` random controls.
pub fn time_step(
    backend: Backend,
    n_q: usize,
    n: usize,
    spec: &BenchmarkSpec,
    cfg: &PropagationConfig,
) -> Result<BenchmarkRow> {
    if spec.repeats == 0 {
        return Err(Error::InvalidParameter("repeats must be at least 1".into()));
    }
    let base = build_spin_chain(n_q, spec.jxy_mhz, spec.t1_us, spec.t2_us)?;
    let model = if n > 0 { attach_uncertainties(base, spec.uncertainty)? } else { base };
    let mset = MultiIndexSet::new(if n > 0 { model.n_uncertainties() } else { 0 }, n);
    let d = model.dim();
    let rho0 = CMatrix::from_fn(d, d, |a, b| if a == 0 && b == 0 { ONE } else { ZERO });
    let state0 = AugmentedState::initial(&mset, &rho0);
    let b = mhz_to_rad_per_ns(spec.bound_mhz);
    let mut samples = Vec::with_capacity(spec.repeats);
    for r in 0..spec.repeats {
        let grid = random_grid(model.n_controls(), 1, spec.dt, vec![(-b, b); model.n_controls()], spec.seed + r as u64)?;
        let t0 = Instant::now();
        let prop = Propagator::new(backend, &model, &mset, &grid, cfg)?;
        let out = prop.step(0, &state0)?;
        samples.push(t0.elapsed().as_nanos() as f64);
        std::hint::black_box(out);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(BenchmarkRow {
        backend,
        n_q,
        n,
        d_aug: mset.len() * d * d,
        median_ns: median(&mut samples),
        mean_ns: mean,
    })
}

/// Rows in `(backend, qubits, order)` order; configurations above the
/// supermatrix cap are skipped for the expm backend.
pub fn benchmark_sweep(spec: &BenchmarkSpec, cfg: &PropagationConfig) -> Result<Vec<BenchmarkRow>> {
    let mut rows = Vec::new();
    for &backend in &spec.backends {
        for &n_q in &spec.qubits {
            for &n in &spec.orders {
                match time_step(backend, n_q, n, spec, cfg) {
                    Ok(row) => {
                        log::info!(
                            "{backend} n_q={n_q} n={n} d_aug={} median={:.3e} ns",
                            row.d_aug,
                            row.median_ns
                        );
                        rows.push(row)
                    }
                    Err(Error::CapExceeded { dim, cap }) => {
                        log::warn!("skipping {backend} n_q={n_q} n={n}: dimension {dim} over cap {cap}");
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweep_is_positive_and_shaped() {
        let spec = BenchmarkSpec {
            qubits: vec![1, 2],
            orders: vec![0, 1],
            repeats: 3,
            backends: vec![Backend::Expm, Backend::Ode, Backend::Trotter],
            ..Default::default()
        };
        let rows = benchmark_sweep(&spec, &PropagationConfig::default()).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r.median_ns > 0.0 && r.mean_ns > 0.0));
        assert_eq!(rows[1].d_aug, 2 * 4);
        assert_eq!(rows[3].d_aug, 3 * 16);
    }

    #[test]
    fn cap_skips_rows() {
        let spec = BenchmarkSpec {
            qubits: vec![2],
            repeats: 1,
            backends: vec![Backend::Expm],
            ..Default::default()
        };
        let cfg = PropagationConfig {
            cap: 8,
            ..Default::default()
        };
        assert!(benchmark_sweep(&spec, &cfg).unwrap().is_empty());
        let zero = BenchmarkSpec { repeats: 0, ..spec };
        assert!(time_step(Backend::Expm, 2, 0, &zero, &PropagationConfig::default()).is_err());
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
