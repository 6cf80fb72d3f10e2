//! Shared model fixtures for unit tests: three hand-built stable
//! two-station networks with known closed-form quantities, and a seeded
//! generator of random stable models for property tests.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{derive, DerivedModel, MmfnModel};
use crate::traffic;

/// Tandem: station 1 feeds station 2 completely, two background states.
/// Axis roots of γ are 43/70 and 25/36; the exact walls are
/// (43/70, 8501/2520).
pub(crate) fn tandem2() -> DerivedModel {
    let m = MmfnModel::new(
        DMatrix::from_row_slice(2, 2, &[2.0, 0.2, 0.0, 0.0]),
        DMatrix::from_row_slice(2, 2, &[1.5, 1.6, 1.9, 1.15]),
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        DMatrix::from_row_slice(2, 2, &[-0.7, 0.7, 1.1, -1.1]),
    )
    .unwrap();
    derive(m).unwrap()
}

/// Feedback pair: half of station 1 goes to 2, a fifth of 2 returns to 1.
/// Station 2 has positive mean net input from outside (its stability comes
/// from the reflection), which makes γ nonnegative along the θ₂ axis.
pub(crate) fn feed2() -> DerivedModel {
    let m = MmfnModel::new(
        DMatrix::from_row_slice(2, 2, &[1.8, 0.2, 0.1, 0.5]),
        DMatrix::from_row_slice(2, 2, &[1.4, 1.7, 0.9, 1.1]),
        DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.2, 0.0]),
        DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.8, -0.8]),
    )
    .unwrap();
    derive(m).unwrap()
}

/// Two decoupled stations, two background states. With no routing the
/// boundary forms reduce to γ_k(θ) = θ_k, and the exact walls coincide with
/// the axis roots 43/12 and 14/9.
pub(crate) fn par2() -> DerivedModel {
    let m = MmfnModel::new(
        DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.4, 1.6]),
        DMatrix::from_row_slice(2, 2, &[1.2, 1.1, 1.3, 1.4]),
        DMatrix::zeros(2, 2),
        DMatrix::from_row_slice(2, 2, &[-1.3, 1.3, 0.6, -0.6]),
    )
    .unwrap();
    derive(m).unwrap()
}

/// Two decoupled stations on a three-state circulant background. Both axis
/// gradients of γ point into the positive quadrant at the diagonal root, so
/// the diagonal direction falls outside the corn region.
pub(crate) fn par3() -> DerivedModel {
    let m = MmfnModel::new(
        DMatrix::from_row_slice(2, 3, &[1.9, 0.7, 0.7, 0.5, 1.7, 0.8]),
        DMatrix::from_row_slice(2, 3, &[1.0, 1.2, 1.4, 1.1, 0.9, 1.5]),
        DMatrix::zeros(2, 2),
        DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 1.0, 1.0, -2.0, 1.0, 1.0, 1.0, -2.0]),
    )
    .unwrap();
    derive(m).unwrap()
}

/// Seeded random stable two-station model with comfortably negative drift
/// and every station filling in at least one background state, so the
/// sublevel-set geometry is nondegenerate. Deterministic per seed.
pub(crate) fn random_stable_2d(seed: u64) -> DerivedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d6d_666e ^ seed);
    for _ in 0..2000 {
        let m = rng.random_range(2..=3usize);
        let lambda = DMatrix::from_fn(2, m, |_, _| rng.random_range(0.0..1.5));
        let mu = DMatrix::from_fn(2, m, |_, _| 0.3 + rng.random_range(0.0..1.7));
        let mut p = DMatrix::zeros(2, 2);
        for k in 0..2 {
            for l in 0..2 {
                if k != l {
                    p[(k, l)] = rng.random_range(0.0..0.5);
                }
            }
        }
        let mut q = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                0.0
            } else {
                0.3 + rng.random_range(0.0..1.2)
            }
        });
        for i in 0..m {
            let s: f64 = q.row(i).iter().sum();
            q[(i, i)] = -s;
        }
        let Ok(model) = MmfnModel::new(lambda, mu, p, q) else { continue };
        let Ok(dm) = derive(model) else { continue };
        let Ok((stable, drift)) = traffic::is_stable(&dm) else { continue };
        let scale = dm.rate_scale();
        if !stable || drift.iter().any(|&x| x > -2e-2 * scale) {
            continue;
        }
        let fills = (0..2).all(|k| (0..m).any(|i| dm.v[(k, i)] > 5e-2 * scale));
        if fills {
            return dm;
        }
    }
    panic!("no stable nondegenerate model found for seed {seed}");
}
