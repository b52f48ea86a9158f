//! Matrix exponential by scaling and squaring around a fixed [13/13] Padé
//! approximant (Higham 2005).

use super::lu::solve;
use super::matrix::{product, CMatrix, Op, C64};
use crate::error::{Error, Result};

/// 1-norm bound below which the [13/13] approximant meets double precision.
const THETA_13: f64 = 5.371920351148152;

const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// `c0*I + c1*A + c2*B + c3*C` for square operands.
fn combo(n: usize, c0: f64, terms: [(f64, &CMatrix); 3]) -> CMatrix {
    let mut out = CMatrix::zeros(n, n);
    for (c, m) in terms {
        out.axpy(re(c), m);
    }
    for i in 0..n {
        out[(i, i)] += re(c0);
    }
    out
}

/// Matrix exponential `e^A`.
pub fn expm(a: &CMatrix) -> Result<CMatrix> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("expm input"));
    }
    let n = a.rows();
    let norm = a.norm_one();
    let squarings = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let a = if squarings > 0 {
        a.scaled(re(0.5f64.powi(squarings as i32)))
    } else {
        a.clone()
    };

    let b = &PADE_13;
    let a2 = product(&a, Op::None, &a, Op::None);
    let a4 = product(&a2, Op::None, &a2, Op::None);
    let a6 = product(&a4, Op::None, &a2, Op::None);

    let inner_u = combo(n, 0.0, [(b[13], &a6), (b[11], &a4), (b[9], &a2)]);
    let mut u_poly = product(&a6, Op::None, &inner_u, Op::None);
    u_poly += &combo(n, b[1], [(b[7], &a6), (b[5], &a4), (b[3], &a2)]);
    let u = product(&a, Op::None, &u_poly, Op::None);

    let inner_v = combo(n, 0.0, [(b[12], &a6), (b[10], &a4), (b[8], &a2)]);
    let mut v = product(&a6, Op::None, &inner_v, Op::None);
    v += &combo(n, b[0], [(b[6], &a6), (b[4], &a4), (b[2], &a2)]);

    let p = &v + &u;
    let q = &v - &u;
    let mut r = solve(&q, &p)?;
    for _ in 0..squarings {
        r = product(&r, Op::None, &r, Op::None);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matrix::{I, ONE, ZERO};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> CMatrix {
        CMatrix::from_fn(n, n, |_, _| {
            C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * scale
        })
    }

    #[test]
    fn zero_maps_to_identity() {
        let e = expm(&CMatrix::zeros(3, 3)).unwrap();
        assert!(e.max_abs_diff(&CMatrix::identity(3)) < 1e-15);
    }

    #[test]
    fn diagonal_exponentiates_entrywise() {
        let z1 = C64::new(0.3, -1.2);
        let z2 = C64::new(-2.0, 7.5);
        let e = expm(&CMatrix::from_diag(&[z1, z2])).unwrap();
        assert!((e[(0, 0)] - z1.exp()).norm() < 1e-13);
        assert!((e[(1, 1)] - z2.exp()).norm() < 1e-12 * z2.exp().norm().max(1.0));
        assert_eq!(e[(0, 1)], ZERO);
    }

    #[test]
    fn pi_half_rotation_about_x() {
        // cos(pi/2) I - i sin(pi/2) sigma_x
        let sx = CMatrix::from_real_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let e = expm(&sx.scaled(-I * std::f64::consts::FRAC_PI_2)).unwrap();
        let expected = CMatrix::from_rows(&[&[ZERO, -I], &[-I, ZERO]]);
        assert!(e.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn rejects_non_square() {
        assert!(matches!(expm(&CMatrix::zeros(2, 3)), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn agrees_with_doubled_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &scale in &[0.1, 1.0, 4.0, 12.0] {
            let a = random(9, scale, &mut rng);
            let full = expm(&a).unwrap();
            let half = expm(&a.scaled(re(0.5))).unwrap();
            let doubled = &half * &half;
            let rel = (&full - &doubled).frobenius_norm() / full.frobenius_norm();
            assert!(rel < 1e-10, "scale {scale}: {rel}");
        }
    }

    #[test]
    fn inverse_by_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut a = random(6, 1.0, &mut rng);
            let f = 5.0 / a.norm_one().max(1e-300) * rng.gen::<f64>();
            a.scale_mut(re(f));
            let prod = &expm(&a).unwrap() * &expm(&a.scaled(-ONE)).unwrap();
            assert!(prod.max_abs_diff(&CMatrix::identity(6)) < 1e-9);
        }
    }

    #[test]
    fn crosses_lu_block_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random(130, 0.05, &mut rng);
        let full = expm(&a).unwrap();
        let half = expm(&a.scaled(re(0.5))).unwrap();
        let rel = (&full - &(&half * &half)).frobenius_norm() / full.frobenius_norm();
        assert!(rel < 1e-10);
    }
}
