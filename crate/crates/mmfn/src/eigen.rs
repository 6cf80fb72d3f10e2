//! Dominant-eigenpair solver for small dense Metzler matrices
//! (nonnegative off-diagonals). The eigenvalue of maximal real part is real
//! and simple for the matrices produced by an irreducible background
//! generator; we locate it with a full complex-spectrum solve and recover
//! the eigenvectors by shifted inverse iteration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) struct DomEig {
    pub gamma: f64,
    /// Distance from `gamma` to the next-largest real part in the spectrum.
    pub gap: f64,
    /// Right eigenvector, strictly positive, max entry 1 before rescaling.
    pub h: DVector<f64>,
    /// Left eigenvector, strictly positive.
    pub xi: DVector<f64>,
}

/// Max row sum of absolute values.
pub(crate) fn inf_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.nrows())
        .map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Eigenvalue of maximal real part plus the spectral gap, via a dense
/// complex-spectrum solve. Errors when the dominant eigenvalue is not
/// numerically real and simple.
pub(crate) fn dominant_value(k: &DMatrix<f64>) -> Result<(f64, f64)> {
    let scale = inf_norm(k).max(1.0);
    let eigs = k.complex_eigenvalues();
    let mut idx = 0;
    for i in 1..eigs.len() {
        if eigs[i].re > eigs[idx].re {
            idx = i;
        }
    }
    let top = eigs[idx];
    if top.im.abs() > 1e-8 * scale {
        return Err(Error::NonConvergence(format!(
            "dominant eigenvalue has imaginary part {:.3e}; expected a real simple eigenvalue",
            top.im
        )));
    }
    let mut next = f64::NEG_INFINITY;
    for (i, e) in eigs.iter().enumerate() {
        if i != idx && e.re > next {
            next = e.re;
        }
    }
    let gap = top.re - next;
    if gap < 1e-12 {
        return Err(Error::NonConvergence(format!(
            "spectral gap {gap:.3e} below 1e-12; dominant eigenvalue is numerically degenerate"
        )));
    }
    Ok((top.re, gap))
}

/// One inverse-iteration solve targeting the eigenvalue nearest `shift`.
/// Returns the sign-normalized eigenvector (max-abs entry +1) and the
/// residual ‖A x − shift·x‖_∞, or None when the shifted matrix is exactly
/// singular for the LU.
fn inverse_iteration(a: &DMatrix<f64>, shift: f64, start: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let n = a.nrows();
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[(i, i)] -= shift;
    }
    let lu = shifted.lu();
    let mut x = start.clone();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for _ in 0..40 {
        let mut y = lu.solve(&x)?;
        // Sign-normalize on the entry of largest magnitude.
        let mut pivot = 0;
        for i in 1..n {
            if y[i].abs() > y[pivot].abs() {
                pivot = i;
            }
        }
        if y[pivot] == 0.0 {
            return None;
        }
        y /= y[pivot];
        let resid = (a * &y - shift * &y).amax();
        let improved = best.as_ref().map_or(true, |(_, r)| resid < *r);
        if improved {
            best = Some((y.clone(), resid));
        } else {
            break; // stagnated at roundoff level
        }
        x = y;
    }
    best
}

/// Full dominant triple: eigenvalue, gap, strictly positive right and left
/// eigenvectors. The vectors are normalized so that ⟨ξ, 1⟩ = 1 and
/// ⟨ξ, h⟩ = 1, in that order.
pub(crate) fn dominant_triple(k: &DMatrix<f64>) -> Result<DomEig> {
    let n = k.nrows();
    let scale = inf_norm(k).max(1.0);
    let (gamma, gap) = dominant_value(k)?;
    let resid_tol = 1e-10 * scale;
    let kt = k.transpose();

    let solve_side = |a: &DMatrix<f64>| -> Result<DVector<f64>> {
        // Retry schedule: nudge the shift if the LU is singular or the
        // iteration converges to a sign-mixed vector.
        let shifts = [
            gamma,
            gamma + 1e-12 * scale,
            gamma - 1e-12 * scale,
            gamma + 1e-10 * scale,
        ];
        let starts = [
            DVector::from_element(n, 1.0),
            DVector::from_fn(n, |i, _| 1.0 + 0.37 * (i as f64 + 1.0)),
        ];
        let mut last_resid = f64::INFINITY;
        for shift in shifts {
            for start in &starts {
                if let Some((y, resid)) = inverse_iteration(a, shift, start) {
                    last_resid = resid;
                    if resid <= resid_tol && y.iter().all(|&v| v > 0.0) {
                        return Ok(y);
                    }
                }
            }
        }
        Err(Error::NonConvergence(format!(
            "inverse iteration failed to produce a positive eigenvector (last residual {last_resid:.3e}, tolerance {resid_tol:.3e})"
        )))
    };

    let h = solve_side(k)?;
    let xi = solve_side(&kt)?;

    // Normalize: ξ sums to 1 first, then h is scaled against ξ.
    let xi = &xi / xi.sum();
    let h = &h / xi.dot(&h);

    Ok(DomEig { gamma, gap, h, xi })
}
