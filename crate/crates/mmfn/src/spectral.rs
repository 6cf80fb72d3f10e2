//! The matrix `K(θ)`, its dominant eigenvalue `γ(θ)` and eigenvectors, the
//! gradient of `γ`, the boundary forms `γ_k(θ)`, and the exponentially
//! twisted background generator.
//!
//! `γ` is a smooth convex function with `γ(0) = 0` and `∇γ(0) = v̄`; its
//! sublevel set `{γ < 0}` drives all decay-rate geometry in
//! [`crate::geometry`].

use nalgebra::{DMatrix, DVector};

use crate::eigen;
use crate::error::{Error, Result};
use crate::model::{DerivedModel, MmfnModel};
use crate::traffic::stationary_background;

/// `γ` and its eigen-data at one exponent `θ`.
#[derive(Clone, Debug)]
pub struct SpectralPoint {
    pub theta: DVector<f64>,
    /// Dominant eigenvalue of `K(θ)`.
    pub gamma: f64,
    /// Right eigenvector, strictly positive, normalized by `⟨ξ, h⟩ = 1`.
    pub h: DVector<f64>,
    /// Left eigenvector, strictly positive, normalized by `⟨ξ, 1⟩ = 1`.
    pub xi: DVector<f64>,
    /// Gradient `∇γ(θ)`, computed from the eigen-perturbation identity
    /// `∂γ/∂θ_k = ξᵗ diag(v_k) h` (the eigenvector-derivative terms cancel
    /// under this normalization).
    pub grad: DVector<f64>,
    /// Distance to the next-largest real part in the spectrum of `K(θ)`.
    /// Values below 1e-8 deserve suspicion; below 1e-12 they are an error.
    pub gap: f64,
}

/// `K(θ) = diag(Σ_k θ_k v_k) + Q`.
pub fn k_matrix(dm: &DerivedModel, theta: &DVector<f64>) -> DMatrix<f64> {
    let m = dm.m();
    let mut k = dm.model.q.clone();
    // Diagonal perturbation w_i = Σ_k θ_k v_k(i) = (θᵗ v)_i.
    let w = dm.v.tr_mul(theta);
    for i in 0..m {
        k[(i, i)] += w[i];
    }
    k
}

/// Fast path: `γ(θ)` alone (no eigenvectors).
pub fn gamma_only(dm: &DerivedModel, theta: &DVector<f64>) -> Result<f64> {
    let k = k_matrix(dm, theta);
    Ok(eigen::dominant_value(&k)?.0)
}

/// Full spectral data at `θ`: eigenvalue, positive eigenvector pair, and the
/// analytic gradient.
pub fn perron(dm: &DerivedModel, theta: &DVector<f64>) -> Result<SpectralPoint> {
    if theta.len() != dm.d() {
        return Err(Error::Parse(format!(
            "theta has dimension {}, expected {}",
            theta.len(),
            dm.d()
        )));
    }
    let k = k_matrix(dm, theta);
    let eig = eigen::dominant_triple(&k)?;
    // grad_k = Σ_i ξ_i v_k(i) h_i.
    let weights = eig.xi.component_mul(&eig.h);
    let grad = &dm.v * &weights;
    Ok(SpectralPoint {
        theta: theta.clone(),
        gamma: eig.gamma,
        h: eig.h,
        xi: eig.xi,
        grad,
        gap: eig.gap,
    })
}

/// `∇γ(θ)`.
pub fn gamma_gradient(dm: &DerivedModel, theta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(perron(dm, theta)?.grad)
}

/// The boundary linear forms `γ_k(θ) = [θᵗ R]_k`, all stations at once.
pub fn gamma_k(dm: &DerivedModel, theta: &DVector<f64>) -> DVector<f64> {
    dm.r.tr_mul(theta)
}

/// The exponentially twisted background generator at `θ` with its
/// stationary distribution and twisted mean drift.
#[derive(Clone, Debug)]
pub struct TwistedGenerator {
    pub theta: DVector<f64>,
    /// `q^θ_ij = q_ij h(j)/h(i)` off the diagonal; rows sum to zero.
    pub q_theta: DMatrix<f64>,
    /// Stationary distribution of `q_theta`.
    pub pi_theta: DVector<f64>,
    /// Twisted mean drift `v̄^θ_k = Σ_i π^θ_i v_k(i)`; equals `∇γ(θ)`.
    pub v_bar_theta: DVector<f64>,
}

/// Builds the twisted generator at `θ`.
///
/// Off-diagonal entries are `q_ij h(j)/h(i)`; each diagonal entry is then
/// set to minus its row's off-diagonal sum, which agrees with the analytic
/// value `Σ_k θ_k v_k(i) + q_ii − γ(θ)` up to the eigen residual and makes
/// the row sums exactly zero.
pub fn twisted_generator(dm: &DerivedModel, theta: &DVector<f64>) -> Result<TwistedGenerator> {
    let sp = perron(dm, theta)?;
    let m = dm.m();
    let scale = dm.rate_scale();
    let w = dm.v.tr_mul(theta);
    let mut qt = DMatrix::zeros(m, m);
    for i in 0..m {
        let mut off_sum = 0.0;
        for j in 0..m {
            if i != j {
                let val = dm.model.q[(i, j)] * sp.h[j] / sp.h[i];
                qt[(i, j)] = val;
                off_sum += val;
            }
        }
        let analytic = w[i] + dm.model.q[(i, i)] - sp.gamma;
        let drift_err = (analytic + off_sum).abs();
        if drift_err > 1e-8 * scale.max(sp.gamma.abs()) {
            return Err(Error::NonConvergence(format!(
                "twisted generator row {i} is off by {drift_err:.3e}; eigenpair too inaccurate"
            )));
        }
        qt[(i, i)] = -off_sum;
    }
    let pi_theta = stationary_background(&qt)?;
    let v_bar_theta = &dm.v * &pi_theta;
    Ok(TwistedGenerator { theta: theta.clone(), q_theta: qt, pi_theta, v_bar_theta })
}

/// The network as seen under the exponential change of measure at `θ`: same
/// rates and routing, background generator replaced by the twist.
pub fn twisted_model(dm: &DerivedModel, theta: &DVector<f64>) -> Result<MmfnModel> {
    let tg = twisted_generator(dm, theta)?;
    MmfnModel::new(
        dm.model.lambda.clone(),
        dm.model.mu.clone(),
        dm.model.p.clone(),
        tg.q_theta,
    )
}
