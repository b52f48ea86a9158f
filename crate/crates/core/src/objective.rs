//! State-transfer and gate objectives on augmented states, their co-states,
//! and channel fidelities.

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedState, MultiIndexSet};
use crate::error::{Error, Result};
use crate::linalg::{kron, trace_product, CMatrix, C64, ONE, ZERO};

/// `Re tr(rho target)`.
pub fn overlap(rho: &CMatrix, target: &CMatrix) -> f64 {
    trace_product(rho, target).re
}

/// Overlap with the target plus a quadratic penalty on every higher-order block.
#[derive(Clone, Debug)]
pub struct RobustStateObjective {
    pub target: CMatrix,
    /// Penalty weight per block index; the zero-order entry is ignored.
    pub weights: Vec<f64>,
}

impl RobustStateObjective {
    /// Same weight `lambda` on every non-zero order.
    pub fn uniform(mset: &MultiIndexSet, target: CMatrix, lambda: f64) -> Result<Self> {
        Self::with_weights(mset, target, vec![lambda; mset.len()])
    }

    pub fn with_weights(mset: &MultiIndexSet, target: CMatrix, mut weights: Vec<f64>) -> Result<Self> {
        if weights.len() != mset.len() {
            return Err(Error::DimensionMismatch {
                context: "penalty weights",
                expected: mset.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter("penalty weights must be non-negative".into()));
        }
        if (target.trace() - ONE).norm() > 1e-12 {
            return Err(Error::InvalidParameter("target state must have unit trace".into()));
        }
        if !target.is_hermitian(1e-12) {
            return Err(Error::InvalidParameter("target state must be Hermitian".into()));
        }
        weights[mset.zero_index()] = 0.0;
        Ok(Self { target, weights })
    }
}

/// `J = F[rho_0] - 1/2 sum_p lambda_p ||rho_p||_F^2`.
pub fn robust_j(state: &AugmentedState, obj: &RobustStateObjective) -> f64 {
    let last = state.len() - 1;
    let mut j = overlap(&state.blocks[last], &obj.target);
    for (b, w) in state.blocks[..last].iter().zip(&obj.weights) {
        if *w != 0.0 {
            j -= 0.5 * w * b.norm_sqr();
        }
    }
    j
}

/// Gradient of [`robust_j`] with respect to the final state.
pub fn costate_j(state: &AugmentedState, obj: &RobustStateObjective) -> AugmentedState {
    let last = state.len() - 1;
    let mut blocks: Vec<CMatrix> = state.blocks[..last]
        .iter()
        .zip(&obj.weights)
        .map(|(b, w)| b.scaled(C64::new(-w, 0.0)))
        .collect();
    blocks.push(obj.target.clone());
    AugmentedState { blocks }
}

fn second_order_slots(mset: &MultiIndexSet) -> Result<Vec<usize>> {
    if mset.n() < 2 {
        return Err(Error::InsufficientOrder {
            order: mset.n(),
            required: 2,
        });
    }
    Ok((0..mset.m())
        .map(|i| {
            let mut p = vec![0u32; mset.m()];
            p[i] = 2;
            mset.index_of(&p).expect("second-order index present when n >= 2")
        })
        .collect())
}

fn check_sigmas(mset: &MultiIndexSet, sigmas: &[f64]) -> Result<()> {
    if sigmas.len() != mset.m() {
        return Err(Error::DimensionMismatch {
            context: "noise scales",
            expected: mset.m(),
            found: sigmas.len(),
        });
    }
    Ok(())
}

/// Noise-averaged overlap to second order: `tr[t rho_0] + sum_i sigma_i^2 tr[t rho_ii]`.
pub fn avg_j_tilde(state: &AugmentedState, mset: &MultiIndexSet, target: &CMatrix, sigmas: &[f64]) -> Result<f64> {
    check_sigmas(mset, sigmas)?;
    let slots = second_order_slots(mset)?;
    let mut j = overlap(state.zero_order(), target);
    for (k, s) in slots.iter().zip(sigmas) {
        j += s * s * overlap(&state.blocks[*k], target);
    }
    Ok(j)
}

pub fn costate_j_tilde(mset: &MultiIndexSet, target: &CMatrix, sigmas: &[f64]) -> Result<AugmentedState> {
    check_sigmas(mset, sigmas)?;
    let slots = second_order_slots(mset)?;
    let mut out = AugmentedState::zeros(mset.len(), target.rows());
    out.blocks[mset.zero_index()] = target.clone();
    for (k, s) in slots.iter().zip(sigmas) {
        out.blocks[*k] = target.scaled(C64::new(s * s, 0.0));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// Three-state set; the identity member is trace-normalized.
    Three,
    /// Computational basis projectors plus the uniform-superposition state.
    DPlusOne,
}

/// Three-state set as written, with the third member left as the identity.
pub fn three_state_set(d: usize) -> [CMatrix; 3] {
    let norm = (d * (d + 1)) as f64;
    let diag: Vec<f64> = (1..=d).map(|k| 2.0 * (d - k + 1) as f64 / norm).collect();
    let all = CMatrix::from_fn(d, d, |_, _| C64::new(1.0 / d as f64, 0.0));
    [CMatrix::from_real_diag(&diag), all, CMatrix::identity(d)]
}

/// Initial states for gate synthesis, all unit trace.
pub fn gate_basis_states(d: usize, kind: BasisKind) -> Result<Vec<CMatrix>> {
    if d < 2 {
        return Err(Error::InvalidParameter(format!("gate basis needs d >= 2, got {d}")));
    }
    Ok(match kind {
        BasisKind::Three => {
            let [a, b, c] = three_state_set(d);
            vec![a, b, c.scaled(C64::new(1.0 / d as f64, 0.0))]
        }
        BasisKind::DPlusOne => {
            let mut v: Vec<CMatrix> = (0..d)
                .map(|i| CMatrix::from_fn(d, d, |a, b| if a == i && b == i { ONE } else { ZERO }))
                .collect();
            v.push(CMatrix::from_fn(d, d, |_, _| C64::new(1.0 / d as f64, 0.0)));
            v
        }
    })
}

/// Largest deviation `||L(rho) - U rho U^dag||_F` over the unnormalized three-state set.
pub fn three_state_residual(channel: impl Fn(&CMatrix) -> CMatrix, u: &CMatrix) -> f64 {
    three_state_set(u.rows())
        .iter()
        .map(|r| (&channel(r) - &r.conjugate_by(u)).frobenius_norm())
        .fold(0.0, f64::max)
}

/// Weighted sum of robust state objectives over a set of input states.
#[derive(Clone, Debug)]
pub struct GateObjective {
    pub target_unitary: CMatrix,
    pub initial_states: Vec<CMatrix>,
    pub weights: Vec<f64>,
    pub terms: Vec<RobustStateObjective>,
}

impl GateObjective {
    /// Uniform weights, each input state targeting `U rho U^dag`, one `lambda`
    /// for every non-zero order.
    pub fn new(mset: &MultiIndexSet, target_unitary: CMatrix, kind: BasisKind, lambda: f64) -> Result<Self> {
        let d = target_unitary.rows();
        let uu = &target_unitary.dagger() * &target_unitary;
        if uu.max_abs_diff(&CMatrix::identity(d)) > 1e-10 {
            return Err(Error::InvalidParameter("target gate is not unitary".into()));
        }
        let initial_states = gate_basis_states(d, kind)?;
        let w = 1.0 / initial_states.len() as f64;
        let terms = initial_states
            .iter()
            .map(|r| RobustStateObjective::uniform(mset, r.conjugate_by(&target_unitary), lambda))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights: vec![w; initial_states.len()],
            target_unitary,
            initial_states,
            terms,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// `sum_i w_i J_i` in index order.
pub fn gate_objective(states: &[AugmentedState], gobj: &GateObjective) -> Result<f64> {
    if states.len() != gobj.len() {
        return Err(Error::DimensionMismatch {
            context: "gate objective states",
            expected: gobj.len(),
            found: states.len(),
        });
    }
    Ok(states
        .iter()
        .zip(&gobj.terms)
        .zip(&gobj.weights)
        .map(|((s, t), w)| w * robust_j(s, t))
        .sum())
}

/// Column-stacked `d^2 x d^2` matrix of a linear map, built from its action on matrix units.
pub fn channel_supermatrix(d: usize, mut apply: impl FnMut(&CMatrix) -> CMatrix) -> CMatrix {
    let mut s = CMatrix::zeros(d * d, d * d);
    for l in 0..d {
        for k in 0..d {
            let unit = CMatrix::from_fn(d, d, |a, b| if a == k && b == l { ONE } else { ZERO });
            let img = crate::linalg::vec(&apply(&unit));
            for (r, v) in img.into_iter().enumerate() {
                s[(r, k + l * d)] = v;
            }
        }
    }
    s
}

/// Supermatrix of `rho -> U rho U^dag`.
pub fn unitary_supermatrix(u: &CMatrix) -> CMatrix {
    kron(&u.conj(), u)
}

/// `tr(S_U^dag S) / d^2`.
pub fn process_fidelity(channel: &CMatrix, u: &CMatrix) -> Result<f64> {
    let d = u.rows();
    if !channel.is_square() {
        return Err(Error::NotSquare {
            rows: channel.rows(),
            cols: channel.cols(),
        });
    }
    if channel.rows() != d * d {
        return Err(Error::DimensionMismatch {
            context: "channel supermatrix side",
            expected: d * d,
            found: channel.rows(),
        });
    }
    Ok(crate::linalg::hs_inner(&unitary_supermatrix(u), channel).re / (d * d) as f64)
}

/// `(d F_pro + 1) / (d + 1)`.
pub fn avg_gate_fidelity(channel: &CMatrix, u: &CMatrix) -> Result<f64> {
    let d = u.rows() as f64;
    Ok((d * process_fidelity(channel, u)? + 1.0) / (d + 1.0))
}

/// Named target gates; qubit 0 is the most significant tensor factor and the
/// controls sit on the leading qubits.
pub fn unitary_preset(name: &str, n_qubits: usize) -> Result<CMatrix> {
    let needs = |k: usize| -> Result<()> {
        if n_qubits != k {
            return Err(Error::InvalidParameter(format!("preset '{name}' acts on {k} qubits, system has {n_qubits}")));
        }
        Ok(())
    };
    match name {
        "hadamard_transform" => {
            if n_qubits == 0 {
                return Err(Error::InvalidParameter("hadamard_transform needs at least one qubit".into()));
            }
            let s = std::f64::consts::FRAC_1_SQRT_2;
            let h = CMatrix::from_real_rows(&[&[s, s], &[s, -s]]);
            let mut u = h.clone();
            for _ in 1..n_qubits {
                u = kron(&u, &h);
            }
            Ok(u)
        }
        "cnot" => {
            needs(2)?;
            Ok(controlled_not(2))
        }
        "toffoli" => {
            needs(3)?;
            Ok(controlled_not(3))
        }
        "cccnot" => {
            needs(4)?;
            Ok(controlled_not(4))
        }
        other => Err(Error::InvalidParameter(format!("unknown gate preset '{other}'"))),
    }
}

/// Flips the last qubit when all others are 1.
fn controlled_not(n: usize) -> CMatrix {
    let d = 1usize << n;
    let mut u = CMatrix::identity(d);
    let (a, b) = (d - 2, d - 1);
    u[(a, a)] = ZERO;
    u[(b, b)] = ZERO;
    u[(a, b)] = ONE;
    u[(b, a)] = ONE;
    u
}

/// Pure state `|psi><psi|` targeted by applying `u` to `|0...0>`.
pub fn prepared_state(u: &CMatrix) -> CMatrix {
    let d = u.rows();
    CMatrix::from_fn(d, d, |a, b| u[(a, 0)] * u[(b, 0)].conj())
}
