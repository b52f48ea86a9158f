//! Brute-force references: full noisy propagation, finite-difference Taylor
//! coefficients, Haar Monte-Carlo fidelities and noise sweeps.
//!
//! Nothing here touches the augmented-block actions or the Trotter factors;
//! every map is built from the model matrices and exponentiated densely.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{expm, product, vec, unvec, CMatrix, Op, C64, I, ONE, ZERO};
use crate::model::{ControlGrid, NoiseDistribution, OpenSystemModel};
use crate::objective::{avg_gate_fidelity, overlap};

/// `d^2 x d^2` Lindblad generator assembled column by column from matrix units.
pub fn lindblad_supermatrix(h: &CMatrix, model: &OpenSystemModel) -> CMatrix {
    let d = h.rows();
    let mut out = CMatrix::zeros(d * d, d * d);
    let anti: Vec<(CMatrix, &CMatrix, f64)> = model
        .lindblads()
        .iter()
        .map(|l| (&l.op.dagger() * &l.op, &l.op, l.rate))
        .collect();
    for l in 0..d {
        for k in 0..d {
            let unit = CMatrix::from_fn(d, d, |a, b| if a == k && b == l { ONE } else { ZERO });
            let mut img = (&(h * &unit) - &(&unit * h)).scaled(-I);
            for (cc, c, g) in &anti {
                let jump = &(*c * &unit) * &c.dagger();
                let anti = &(cc * &unit) + &(&unit * cc);
                img.axpy(C64::new(*g, 0.0), &jump);
                img.axpy(C64::new(-0.5 * g, 0.0), &anti);
            }
            for (r, v) in vec(&img).into_iter().enumerate() {
                out[(r, k + l * d)] = v;
            }
        }
    }
    out
}

/// Superoperator of the full noisy evolution over the grid at fixed `eps`.
pub fn noisy_channel(model: &OpenSystemModel, grid: &ControlGrid, eps: &[f64]) -> Result<CMatrix> {
    let d = model.dim();
    let mut total = CMatrix::identity(d * d);
    for k in 0..grid.steps() {
        let h = model.perturbed_hamiltonian(grid.step(k), eps)?;
        let p = expm(&lindblad_supermatrix(&h, model).scaled(C64::new(grid.dt(), 0.0)))?;
        total = product(&p, Op::None, &total, Op::None);
    }
    Ok(total)
}

/// Applies a column-stacked channel supermatrix to `rho`.
pub fn apply_super(s: &CMatrix, rho: &CMatrix) -> Result<CMatrix> {
    let d = rho.rows();
    let v = CMatrix::from_vec(d * d, 1, vec(rho))?;
    unvec(product(s, Op::None, &v, Op::None).as_slice(), d)
}

/// `rho(T; eps)` from the full master equation with `H_S + sum eps_j E_j`.
pub fn propagate_noisy_exact(model: &OpenSystemModel, grid: &ControlGrid, eps: &[f64], rho0: &CMatrix) -> Result<CMatrix> {
    let d = model.dim();
    let mut v = CMatrix::from_vec(d * d, 1, vec(rho0))?;
    for k in 0..grid.steps() {
        let h = model.perturbed_hamiltonian(grid.step(k), eps)?;
        let p = expm(&lindblad_supermatrix(&h, model).scaled(C64::new(grid.dt(), 0.0)))?;
        v = product(&p, Op::None, &v, Op::None);
    }
    unvec(v.as_slice(), d)
}

/// Central-difference estimate of the Taylor coefficient `(1/p!) d^p rho(T) / d eps^p` at `eps = 0`.
pub fn fd_taylor_block(model: &OpenSystemModel, grid: &ControlGrid, rho0: &CMatrix, p: &[u32], h: f64) -> Result<CMatrix> {
    let m = model.n_uncertainties();
    if p.len() != m {
        return Err(Error::DimensionMismatch {
            context: "multi-index width",
            expected: m,
            found: p.len(),
        });
    }
    let total: u32 = p.iter().sum();
    let at = |shifts: &[(usize, f64)]| -> Result<CMatrix> {
        let mut eps = vec![0.0; m];
        for &(j, s) in shifts {
            eps[j] += s;
        }
        propagate_noisy_exact(model, grid, &eps, rho0)
    };
    let nz: Vec<usize> = (0..m).filter(|&j| p[j] > 0).collect();
    let re = |x: f64| C64::new(x, 0.0);
    match total {
        0 => at(&[]),
        1 => {
            let j = nz[0];
            let mut out = at(&[(j, h)])?;
            out -= &at(&[(j, -h)])?;
            Ok(out.scaled(re(1.0 / (2.0 * h))))
        }
        2 if nz.len() == 1 => {
            let j = nz[0];
            let mut out = at(&[(j, h)])?;
            out += &at(&[(j, -h)])?;
            out.axpy(re(-2.0), &at(&[])?);
            Ok(out.scaled(re(0.5 / (h * h))))
        }
        2 => {
            let (i, j) = (nz[0], nz[1]);
            let mut out = at(&[(i, h), (j, h)])?;
            out -= &at(&[(i, h), (j, -h)])?;
            out -= &at(&[(i, -h), (j, h)])?;
            out += &at(&[(i, -h), (j, -h)])?;
            Ok(out.scaled(re(1.0 / (4.0 * h * h))))
        }
        other => Err(Error::UnsupportedOrder(other as usize)),
    }
}

/// Haar Monte-Carlo estimate of the average gate fidelity with its standard error.
pub fn haar_mc_agf(
    channel: impl Fn(&CMatrix) -> CMatrix,
    u: &CMatrix,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 100 {
        return Err(Error::InvalidParameter(format!("need at least 100 samples, got {n_samples}")));
    }
    let d = u.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let mut psi: Vec<C64> = (0..d)
            .map(|_| C64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
            .collect();
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        psi.iter_mut().for_each(|z| *z /= norm);
        let rho = CMatrix::from_fn(d, d, |a, b| psi[a] * psi[b].conj());
        let out = channel(&rho);
        let phi: Vec<C64> = (0..d).map(|a| (0..d).map(|b| u[(a, b)] * psi[b]).sum()).collect();
        let mut f = ZERO;
        for a in 0..d {
            for b in 0..d {
                f += phi[a].conj() * out[(a, b)] * phi[b];
            }
        }
        sum += f.re;
        sum_sq += f.re * f.re;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// What a noise sweep scores each sample against.
#[derive(Clone, Debug)]
pub enum SweepTarget {
    /// Average gate fidelity against a target unitary.
    Gate(CMatrix),
    /// Overlap of the evolved initial state with a target state.
    State { initial: CMatrix, target: CMatrix },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub threshold: f64,
    /// Fraction of samples with error at most `threshold`.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepResult {
    pub samples: Vec<Vec<f64>>,
    pub fidelities: Vec<f64>,
    pub mean_error: f64,
    pub cdf: Vec<CdfRow>,
}

/// Empirical CDF of `errors` at each threshold; a final row at 1.0 is added
/// when the thresholds stop short of it.
pub fn error_cdf(errors: &[f64], thresholds: &[f64]) -> Vec<CdfRow> {
    let mut ts: Vec<f64> = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    if ts.last().map_or(true, |&t| t < 1.0) {
        ts.push(1.0);
    }
    let n = errors.len().max(1) as f64;
    ts.into_iter()
        .map(|t| CdfRow {
            threshold: t,
            fraction: errors.iter().filter(|&&e| e <= t).count() as f64 / n,
        })
        .collect()
}

/// Samples `count` parameter tuples and scores the full noisy evolution for each.
pub fn noise_sweep(
    model: &OpenSystemModel,
    grid: &ControlGrid,
    target: &SweepTarget,
    dist: &NoiseDistribution,
    count: usize,
    thresholds: &[f64],
) -> Result<NoiseSweepResult> {
    if count == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    if dist.sigmas.len() != model.n_uncertainties() {
        return Err(Error::DimensionMismatch {
            context: "noise scales vs uncertainty operators",
            expected: model.n_uncertainties(),
            found: dist.sigmas.len(),
        });
    }
    let samples = dist.sample(count);
    let fidelities = samples
        .par_iter()
        .map(|eps| -> Result<f64> {
            let ch = noisy_channel(model, grid, eps)?;
            match target {
                SweepTarget::Gate(u) => avg_gate_fidelity(&ch, u),
                SweepTarget::State { initial, target } => Ok(overlap(&apply_super(&ch, initial)?, target)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = fidelities.iter().map(|f| 1.0 - f).collect();
    let mean_error = errors.iter().sum::<f64>() / count as f64;
    Ok(NoiseSweepResult {
        cdf: error_cdf(&errors, thresholds),
        samples,
        fidelities,
        mean_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{AugmentedState, MultiIndexSet};
    use crate::linalg::pauli;
    use crate::model::{attach_uncertainties, build_spin_chain, mhz_to_rad_per_ns, random_grid, NoiseKind, UncertaintyKind};
    use crate::objective::channel_supermatrix;
    use crate::propagate::{propagate_forward, Backend, PropagationConfig};
    use rand::Rng;

    fn pure(d: usize, i: usize) -> CMatrix {
        CMatrix::from_fn(d, d, |a, b| if a == i && b == i { ONE } else { ZERO })
    }

    fn bounds(n: usize) -> Vec<(f64, f64)> {
        let b = mhz_to_rad_per_ns(100.0);
        vec![(-b, b); n]
    }

    #[test]
    fn zero_noise_matches_augmented_zero_block() {
        let m = attach_uncertainties(build_spin_chain(2, 30.0, 0.5, 0.5).unwrap(), UncertaintyKind::Edges).unwrap();
        let grid = random_grid(4, 10, 0.5, bounds(4), 1).unwrap();
        let s = MultiIndexSet::new(2, 1);
        let rho = pure(4, 0);
        let (aug, _) = propagate_forward(
            Backend::Expm,
            &m,
            &s,
            &grid,
            &AugmentedState::initial(&s, &rho),
            false,
            &PropagationConfig::default(),
        )
        .unwrap();
        let brute = propagate_noisy_exact(&m, &grid, &[0.0, 0.0], &rho).unwrap();
        assert!(brute.max_abs_diff(aug.zero_order()) < 1e-10);
        assert!((brute.trace() - ONE).norm() < 1e-10);
    }

    #[test]
    fn closed_rabi_populations() {
        let m = build_spin_chain(1, 30.0, 1.0, 1.0).unwrap().without_lindblads();
        let omega = 0.05;
        let grid = ControlGrid::new(0.5, 20, 2, bounds(2)).unwrap().with_amplitudes([omega, 0.0].repeat(20)).unwrap();
        let out = propagate_noisy_exact(&m, &grid, &[], &pure(2, 0)).unwrap();
        let p1 = (omega * 10.0f64).sin().powi(2);
        assert!((out[(1, 1)].re - p1).abs() < 1e-12);
    }

    #[test]
    fn supermatrix_matches_generator_action() {
        let m = build_spin_chain(1, 30.0, 0.01, 0.02).unwrap();
        let h = m.system_hamiltonian(&[0.3, -0.2]).unwrap();
        let sup = lindblad_supermatrix(&h, &m);
        let rho = CMatrix::from_real_rows(&[&[0.6, 0.1], &[0.1, 0.4]]);
        let gen = crate::augment::LindbladGenerator::new(&m, &[0.3, -0.2]).unwrap();
        assert!(apply_super(&sup, &rho).unwrap().max_abs_diff(&gen.apply(&rho)) < 1e-14);
    }

    #[test]
    fn zero_order_stencil_is_plain_propagation() {
        let m = attach_uncertainties(build_spin_chain(1, 30.0, 1.0, 1.0).unwrap(), UncertaintyKind::Edges).unwrap();
        let grid = random_grid(2, 5, 0.5, bounds(2), 2).unwrap();
        let a = fd_taylor_block(&m, &grid, &pure(2, 0), &[0], 1e-4).unwrap();
        let b = propagate_noisy_exact(&m, &grid, &[0.0], &pure(2, 0)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            fd_taylor_block(&m, &grid, &pure(2, 0), &[3], 1e-4),
            Err(Error::UnsupportedOrder(3))
        ));
    }

    #[test]
    fn stencil_is_stable_under_step_halving() {
        let m = attach_uncertainties(build_spin_chain(2, 30.0, 1.0, 1.0).unwrap(), UncertaintyKind::Edges).unwrap();
        let grid = random_grid(4, 10, 0.5, bounds(4), 3).unwrap();
        let h = 1e-4;
        for p in [[1u32, 0], [0, 1]] {
            let a = fd_taylor_block(&m, &grid, &pure(4, 0), &p, h).unwrap();
            let b = fd_taylor_block(&m, &grid, &pure(4, 0), &p, h / 2.0).unwrap();
            let rel = (&a - &b).frobenius_norm() / a.frobenius_norm();
            assert!(rel < 1e-4, "{p:?}: {rel}");
        }
    }

    #[test]
    fn haar_identity_and_depolarizing() {
        let id = CMatrix::identity(2);
        let (mean, se) = haar_mc_agf(|r| r.clone(), &id, 500, 1).unwrap();
        assert!((mean - 1.0).abs() < 1e-12 && se < 1e-7);
        let (mean, se) = haar_mc_agf(|r| CMatrix::identity(2).scaled(r.trace() * 0.5), &id, 20_000, 2).unwrap();
        assert!((mean - 0.5).abs() < 3.0 * se + 1e-12, "{mean} +- {se}");
        assert!(haar_mc_agf(|r| r.clone(), &id, 10, 1).is_err());
    }

    #[test]
    fn haar_agrees_with_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = expm(&pauli::y().scaled(-I * 0.4)).unwrap();
        // amplitude damping after a small rotation
        let g: f64 = rng.gen_range(0.1..0.4);
        let k0 = CMatrix::from_real_rows(&[&[1.0, 0.0], &[0.0, (1.0 - g).sqrt()]]);
        let k1 = CMatrix::from_real_rows(&[&[0.0, g.sqrt()], &[0.0, 0.0]]);
        let ch = |r: &CMatrix| -> CMatrix {
            let r = r.conjugate_by(&u);
            &r.conjugate_by(&k0) + &r.conjugate_by(&k1)
        };
        let closed = avg_gate_fidelity(&channel_supermatrix(2, ch), &u).unwrap();
        let (mean, se) = haar_mc_agf(ch, &u, 20_000, 5).unwrap();
        assert!((mean - closed).abs() < 3.0 * se, "{mean} vs {closed} (se {se})");
    }

    #[test]
    fn sweep_without_noise_is_constant() {
        let m = attach_uncertainties(build_spin_chain(1, 30.0, 30.0, 30.0).unwrap(), UncertaintyKind::Edges).unwrap();
        let grid = random_grid(2, 4, 0.5, bounds(2), 5).unwrap();
        let dist = NoiseDistribution::new(NoiseKind::Normal, vec![0.0], 1).unwrap();
        let r = noise_sweep(&m, &grid, &SweepTarget::Gate(CMatrix::identity(2)), &dist, 8, &[0.01, 0.1]).unwrap();
        assert!(r.fidelities.iter().all(|f| *f == r.fidelities[0]));
        assert!(r.fidelities.iter().all(|f| (0.0..=1.0 + 1e-9).contains(f)));
        assert_eq!(r.cdf.last().unwrap().fraction, 1.0);
        for w in r.cdf.windows(2) {
            assert!(w[0].fraction <= w[1].fraction);
        }
        assert!(noise_sweep(&m, &grid, &SweepTarget::Gate(CMatrix::identity(2)), &dist, 0, &[]).is_err());
    }
}
