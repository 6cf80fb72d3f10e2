//! Sublevel-set geometry of `γ` and the decay-rate machinery built on it:
//! membership classification for `Γ⁻`/`Γ⁺` and their `γ_k`-constrained
//! variants, boolean lattices over a bounding box, the domain fixed-point
//! iteration producing `D_k` and `D^(max)`, the exact two-station wall
//! solver, and directional/coordinate decay-rate bounds.
//!
//! All set computations are grid-based: sets are boolean occupancy lattices
//! over a [`BoundingBox`], and the arrow (down-closure) operators become
//! suffix scans. Costs are exponential in the number of stations; practical
//! for d ≤ 6 and intended for d ∈ {2, 3}.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::DerivedModel;
use crate::spectral::{self, SpectralPoint};
use crate::traffic;

/// Width of the boundary band used by every strict-inequality test on γ
/// and γ_k. Points within the band are classified `Boundary`.
pub fn boundary_band(dm: &DerivedModel) -> f64 {
    1e-12 * dm.rate_scale()
}

// ---------------------------------------------------------------------------
// Three-valued classification
// ---------------------------------------------------------------------------

/// Three-valued set membership: strict inequalities get a tolerance band,
/// and points inside the band are reported as `Boundary` rather than being
/// silently assigned to either side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Membership {
    In,
    Boundary,
    Out,
}

/// Membership flags of one point θ in the four sets.
#[derive(Clone, Debug, Serialize)]
pub struct Classification {
    pub gamma: f64,
    pub gamma_k: Vec<f64>,
    /// θ ∈ Γ⁻ = {γ < 0}.
    pub gamma_minus: Membership,
    /// θ ∈ Γ⁺ = {γ > 0}.
    pub gamma_plus: Membership,
    /// θ ∈ Γ⁻_A = Γ⁻ ∩ {γ_k < 0 ∀k ∈ A}.
    pub gamma_minus_a: Membership,
    /// θ ∈ Γ⁺_A = Γ⁺ ∩ {γ_k ≥ 0 ∀k ∈ A}; the γ_k conditions here are
    /// non-strict, so band points count as satisfied.
    pub gamma_plus_a: Membership,
}

fn side(x: f64, band: f64) -> i8 {
    if x < -band {
        -1
    } else if x > band {
        1
    } else {
        0
    }
}

/// Classifies θ against Γ⁻, Γ⁺, Γ⁻_A, Γ⁺_A for a station subset `a`
/// (0-based indices).
pub fn classify(dm: &DerivedModel, theta: &DVector<f64>, a: &[usize]) -> Result<Classification> {
    let band = boundary_band(dm);
    let gamma = spectral::gamma_only(dm, theta)?;
    let gk = spectral::gamma_k(dm, theta);
    let g = side(gamma, band);
    let gamma_minus = match g {
        -1 => Membership::In,
        0 => Membership::Boundary,
        _ => Membership::Out,
    };
    let gamma_plus = match g {
        1 => Membership::In,
        0 => Membership::Boundary,
        _ => Membership::Out,
    };
    let sides_a: Vec<i8> = a.iter().map(|&k| side(gk[k], band)).collect();
    // Γ⁻_A: all strict "< 0" conditions; any condition positive with margin
    // puts the point out, any band value leaves it on the boundary.
    let gamma_minus_a = if g == -1 && sides_a.iter().all(|&s| s == -1) {
        Membership::In
    } else if g == 1 || sides_a.iter().any(|&s| s == 1) {
        Membership::Out
    } else {
        Membership::Boundary
    };
    // Γ⁺_A: γ > 0 strict, γ_k ≥ 0 non-strict (band included).
    let gamma_plus_a = if g == 1 && sides_a.iter().all(|&s| s >= 0) {
        Membership::In
    } else if g == -1 || sides_a.iter().any(|&s| s == -1) {
        Membership::Out
    } else {
        Membership::Boundary
    };
    Ok(Classification {
        gamma,
        gamma_k: gk.iter().copied().collect(),
        gamma_minus,
        gamma_plus,
        gamma_minus_a,
        gamma_plus_a,
    })
}

/// Direction along which only station `k`'s boundary form grows:
/// w_k = (R⁻¹)ᵗ e_k, so that γ_ℓ(t·w_k) = t·1{ℓ=k} and the slope of
/// γ(t·w_k) at 0 equals the station-k drift [R⁻¹v̄]_k.
pub fn station_ray(dm: &DerivedModel, k: usize) -> DVector<f64> {
    DVector::from_iterator(dm.d(), dm.r_inv.row(k).iter().copied())
}

// ---------------------------------------------------------------------------
// Bounding box and boolean lattices
// ---------------------------------------------------------------------------

/// Axis-aligned exploration box with a uniform grid per axis. The origin is
/// always an exact lattice point: coordinates are computed as
/// `(index − origin_index) · step`, never as `lo + index · step`.
#[derive(Clone, Debug, Serialize)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Cells per axis; the lattice has `cells + 1` points per axis.
    pub cells: Vec<usize>,
    pub step: Vec<f64>,
    pub origin_index: Vec<usize>,
    /// Axes whose positive extent had to be capped because γ never crossed
    /// zero along the axis (the sublevel set may continue past the box).
    pub truncated: Vec<usize>,
}

impl BoundingBox {
    /// Builds a box from requested bounds, snapping `lo`/`hi` by less than
    /// half a step so the origin lands exactly on the lattice. Requires
    /// `lo < 0 < hi` per axis (the iteration's seed sets live in the
    /// strictly negative orthant) and at least 4 cells per axis.
    pub fn with_bounds(lo: &[f64], hi: &[f64], cells: &[usize]) -> Result<BoundingBox> {
        let d = lo.len();
        if hi.len() != d || cells.len() != d {
            return Err(Error::Parse("box arrays must share one length".into()));
        }
        let mut step = vec![0.0; d];
        let mut origin = vec![0usize; d];
        let mut slo = vec![0.0; d];
        let mut shi = vec![0.0; d];
        for a in 0..d {
            if !(lo[a] < 0.0 && hi[a] > 0.0) {
                return Err(Error::Precondition(format!(
                    "box axis {a} must straddle the origin (got [{}, {}])",
                    lo[a], hi[a]
                )));
            }
            if cells[a] < 4 {
                return Err(Error::Precondition(format!(
                    "axis {a} needs at least 4 cells, got {}",
                    cells[a]
                )));
            }
            step[a] = (hi[a] - lo[a]) / cells[a] as f64;
            let o = (-lo[a] / step[a]).round() as i64;
            let o = o.clamp(1, cells[a] as i64 - 1) as usize;
            origin[a] = o;
            slo[a] = -(o as f64) * step[a];
            shi[a] = (cells[a] - o) as f64 * step[a];
        }
        Ok(BoundingBox {
            lo: slo,
            hi: shi,
            cells: cells.to_vec(),
            step,
            origin_index: origin,
            truncated: Vec::new(),
        })
    }

    pub fn d(&self) -> usize {
        self.lo.len()
    }

    /// Lattice points along one axis.
    pub fn npts(&self, axis: usize) -> usize {
        self.cells[axis] + 1
    }

    pub fn dims(&self) -> Vec<usize> {
        (0..self.d()).map(|a| self.npts(a)).collect()
    }

    /// Coordinate of lattice index `idx` on `axis`; exact 0.0 at the origin
    /// index.
    pub fn coord(&self, axis: usize, idx: usize) -> f64 {
        (idx as f64 - self.origin_index[axis] as f64) * self.step[axis]
    }

    /// Full coordinate vector of a multi-index.
    pub fn point(&self, multi: &[usize]) -> DVector<f64> {
        DVector::from_iterator(self.d(), (0..self.d()).map(|a| self.coord(a, multi[a])))
    }
}

/// Dense boolean occupancy over a rectangular lattice (any dimension).
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    pub dims: Vec<usize>,
    strides: Vec<usize>,
    pub cells: Vec<bool>,
}

impl Lattice {
    pub fn new(dims: &[usize]) -> Lattice {
        let d = dims.len();
        let mut strides = vec![1usize; d];
        for a in (0..d.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * dims[a + 1];
        }
        let total: usize = dims.iter().product();
        Lattice { dims: dims.to_vec(), strides, cells: vec![false; total] }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn idx(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(&i, &s)| i * s).sum()
    }

    pub fn decode(&self, lin: usize) -> Vec<usize> {
        (0..self.dims.len()).map(|a| (lin / self.strides[a]) % self.dims[a]).collect()
    }

    fn coord_of(&self, lin: usize, axis: usize) -> usize {
        (lin / self.strides[axis]) % self.dims[axis]
    }

    pub fn get(&self, multi: &[usize]) -> bool {
        self.cells[self.idx(multi)]
    }

    pub fn set(&mut self, multi: &[usize], v: bool) {
        let i = self.idx(multi);
        self.cells[i] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    /// Dominance suffix scan: output true at p iff some set point q ≥ p
    /// coordinatewise. Descending linear order is a valid sweep because
    /// `lin + stride` is numerically above `lin`.
    fn suffix_or(&self) -> Lattice {
        let mut out = self.clone();
        let d = self.dims.len();
        for a in 0..d {
            let s = self.strides[a];
            for lin in (0..out.cells.len()).rev() {
                if !out.cells[lin] && out.coord_of(lin, a) + 1 < self.dims[a] && out.cells[lin + s]
                {
                    out.cells[lin] = true;
                }
            }
        }
        out
    }

    /// Down-closure ←C on the lattice: p ∈ ←C iff some set point q ≥ p
    /// coordinatewise. The sets closed here sample *open* regions (strict
    /// sublevel and sign conditions), so an in-set witness q certifies a
    /// strictly dominating continuum point q + ε·𝟙 and weak lattice
    /// domination is the tight sound discretization; demanding a witness
    /// at p + 𝟙 would shave one cell per closure, and the loss compounds
    /// through the region recursion.
    pub fn down_closure(&self) -> Lattice {
        self.suffix_or()
    }

    /// True when every set point's coordinatewise predecessors are also set
    /// (the definition of a down-set, checked one step at a time).
    pub fn is_down_set(&self) -> bool {
        for lin in 0..self.cells.len() {
            if !self.cells[lin] {
                continue;
            }
            for a in 0..self.dims.len() {
                if self.coord_of(lin, a) > 0 && !self.cells[lin - self.strides[a]] {
                    return false;
                }
            }
        }
        true
    }

    pub fn is_subset_of(&self, other: &Lattice) -> bool {
        self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }
}

// ---------------------------------------------------------------------------
// auto_box
// ---------------------------------------------------------------------------

/// Finds the positive root of the convex scalar function g(t) = γ(t·dir),
/// where g(0) = 0. Returns None when g has no strictly positive crossing
/// within the doubling budget (either because it grows immediately or
/// because it stays negative past `t_max`).
fn ray_gamma_root(dm: &DerivedModel, dir: &DVector<f64>, t_max: f64) -> Result<Option<f64>> {
    let band = boundary_band(dm);
    let g = |t: f64| spectral::gamma_only(dm, &(dir * t));
    // Doubling scan for a sign change from below.
    let mut t_neg: Option<f64> = None;
    let mut t = t_max / 2f64.powi(40);
    let mut hit = None;
    while t <= t_max {
        let v = g(t)?;
        if v < -band {
            t_neg = Some(t);
        } else if v > band {
            hit = Some(t);
            break;
        }
        t *= 2.0;
    }
    let (Some(mut lo), Some(mut hi)) = (t_neg, hit) else {
        return Ok(None);
    };
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if g(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Builds a symmetric exploration box for a stable model: per axis, the
/// positive extent is twice the positive root of γ along that axis when the
/// root exists, and a capped default (with the axis flagged truncated)
/// when γ never crosses zero there. `cells` is the per-axis cell count
/// (rounded up to even so the origin is a lattice point).
pub fn auto_box(dm: &DerivedModel, cells: usize) -> Result<BoundingBox> {
    let (stable, _) = traffic::is_stable(dm)?;
    if !stable {
        return Err(Error::Precondition(
            "model is unstable; decay-rate domains are undefined".into(),
        ));
    }
    let d = dm.d();
    let scale = dm.rate_scale();
    let cap = 50.0 / scale;
    let mut hi = vec![0.0; d];
    let mut truncated = Vec::new();
    for k in 0..d {
        let mut e = DVector::zeros(d);
        e[k] = 1.0;
        match ray_gamma_root(dm, &e, cap / 2.0)? {
            Some(root) => hi[k] = 2.0 * root,
            None => {
                hi[k] = cap;
                truncated.push(k);
            }
        }
    }
    let lo: Vec<f64> = hi.iter().map(|&h| -h).collect();
    let n = (cells.max(4) + cells % 2).max(4);
    let mut b = BoundingBox::with_bounds(&lo, &hi, &vec![n; d])?;
    b.truncated = truncated;
    Ok(b)
}

// ---------------------------------------------------------------------------
// Fixed-point iteration
// ---------------------------------------------------------------------------

/// Result of the domain fixed-point iteration on a grid.
#[derive(Clone, Debug)]
pub struct DomainGrid {
    pub bbox: BoundingBox,
    /// γ at every full-dimensional lattice point (row-major, last axis
    /// fastest).
    pub gamma: Vec<f64>,
    /// Lattice points with γ < −band.
    pub gamma_minus: Lattice,
    /// ←Γ⁻ on the lattice (strict down-closure of `gamma_minus`).
    pub dc_gamma_minus: Lattice,
    /// D_k for each station, on the lattice with axis k projected out.
    pub dk: Vec<Lattice>,
    /// D^(max) = {θ ∈ ←Γ⁻ : θ_{K∖{k}} ∈ D_k ∀k} on the full lattice.
    pub dmax: Lattice,
    /// Sweeps needed to reach set equality.
    pub iterations: usize,
    /// Per-sweep cardinalities of each D_k (first entry = seed sets).
    pub growth: Vec<Vec<usize>>,
    /// Axes where Γ⁻ touches the top face of the box (set membership past
    /// the box is unknown there), merged with the box's own flags.
    pub truncated_axes: Vec<usize>,
}

fn multi_without(multi: &[usize], axis: usize) -> Vec<usize> {
    multi.iter().enumerate().filter(|&(a, _)| a != axis).map(|(_, &i)| i).collect()
}

/// Evaluates γ on every lattice point of the box, in parallel.
fn gamma_lattice(dm: &DerivedModel, bbox: &BoundingBox) -> Result<Vec<f64>> {
    let shape = Lattice::new(&bbox.dims());
    (0..shape.len())
        .into_par_iter()
        .map(|lin| spectral::gamma_only(dm, &bbox.point(&shape.decode(lin))))
        .collect()
}

/// Runs the domain fixed-point iteration on `bbox`.
///
/// Seed: D^(0)_k is the strictly negative orthant of the projected lattice.
/// Sweep: a projected point p enters D^(n)_k when some station set A ∋ k
/// admits a Γ⁻_A witness φ that dominates a lift of p along axis k and
/// itself satisfies proj_ℓ(φ) ∈ ←D^(n−1)_ℓ for every ℓ ∉ A. Sweeps are
/// monotone by construction (each generation is unioned into the previous
/// one) and run to set equality. The maximal-set assembly and a
/// nontriviality assertion (some D_k must properly grow past its seed)
/// follow.
pub fn fixed_point_iteration(dm: &DerivedModel, bbox: &BoundingBox) -> Result<DomainGrid> {
    let (stable, _) = traffic::is_stable(dm)?;
    if !stable {
        return Err(Error::Precondition(
            "model is unstable; decay-rate domains are undefined".into(),
        ));
    }
    let d = dm.d();
    if bbox.d() != d {
        return Err(Error::Parse("box dimension does not match the model".into()));
    }
    let band = boundary_band(dm);
    let dims = bbox.dims();
    let shape = Lattice::new(&dims);
    let total = shape.len();
    let gamma = gamma_lattice(dm, bbox)?;

    // Bitmask per point: bit k of neg[lin] says γ_k(θ) < −band.
    let mut gamma_minus = Lattice::new(&dims);
    let mut neg = vec![0u32; total];
    for lin in 0..total {
        gamma_minus.cells[lin] = gamma[lin] < -band;
        let multi = shape.decode(lin);
        for k in 0..d {
            // γ_k(θ) = Σ_a θ_a R[a, k]
            let gk: f64 =
                (0..d).map(|a| bbox.coord(a, multi[a]) * dm.r[(a, k)]).sum();
            if gk < -band {
                neg[lin] |= 1 << k;
            }
        }
    }

    // Γ⁻_A witness marks for every station subset A (bitmask). A mark at
    // lattice point c certifies a continuum point φ ∈ Γ⁻_A inside the cell
    // above c (so φ dominates c), found one of two ways:
    //   - interior: γ(c) < −band and γ_k(c) < −band for all k ∈ A; c
    //     itself, nudged by ε𝟙, is the witness.
    //   - slide: Γ⁻_A can pinch thinner than one cell against the sign
    //     hyperplanes {γ_k = 0}, invisible to pointwise sampling. From any
    //     lattice q, slide along −w to r = q − s*·w, where w ≥ 0 is
    //     supported on A with [wᵗR]_k = 1 for k ∈ A (wᵗ = 𝟙ᵗ(R_AA)⁻¹ ≥ 0
    //     because R_AA is an M-matrix) and s* = max(0, max_{k∈A} γ_k(q)).
    //     Then γ_k(r) = γ_k(q) − s* ≤ 0 for all k ∈ A, and a single γ
    //     evaluation at r decides feasibility: if γ(r) < −band, the point
    //     φ = r − ε·w satisfies every condition strictly; its strict
    //     lattice floor along the axes of A (weak floor elsewhere) takes
    //     the mark.
    // The marks stay raw here: each sweep generation intersects them with
    // the D-set conditions — evaluated at the witness, as the walls
    // equations demand — before taking the down-closure.
    let nmask = 1usize << d;
    let mut wmarks: Vec<Lattice> = Vec::with_capacity(nmask);
    wmarks.push(gamma_minus.clone());
    for mask in 1..nmask as u32 {
        let ks: Vec<usize> = (0..d).filter(|&k| mask & (1 << k) != 0).collect();
        // w: nonnegative, supported on A, with [wᵗR]_k = 1 on A.
        let raa =
            DMatrix::from_fn(ks.len(), ks.len(), |i, j| dm.r[(ks[i], ks[j])]);
        let ones = DVector::from_element(ks.len(), 1.0);
        let w_sub = raa.transpose().lu().solve(&ones).ok_or_else(|| {
            Error::NonConvergence("singular station submatrix of I - Pᵗ".into())
        })?;
        let mut w = vec![0.0; d];
        for (i, &a) in ks.iter().enumerate() {
            w[a] = w_sub[i];
        }

        let mut b = Lattice::new(&dims);
        for lin in 0..total {
            b.cells[lin] = gamma_minus.cells[lin] && (neg[lin] & mask) == mask;
        }
        let slid: Vec<usize> = (0..total)
            .into_par_iter()
            .filter_map(|lin| {
                let multi = shape.decode(lin);
                let theta = bbox.point(&multi);
                let gplus = ks
                    .iter()
                    .map(|&k| (0..d).map(|a| theta[a] * dm.r[(a, k)]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max);
                if gplus < -band {
                    // Strictly interior in every sign condition: the direct
                    // witness above already covers p ≤ q.
                    return None;
                }
                let sstar = gplus.max(0.0);
                let mut r = theta.clone();
                for &a in &ks {
                    r[a] -= sstar * w[a];
                }
                let g_r = if sstar > 0.0 {
                    spectral::gamma_only(dm, &r).ok()?
                } else {
                    gamma[lin]
                };
                if g_r >= -band {
                    return None;
                }
                let mut c = multi.clone();
                for &a in &ks {
                    let tiny = 1e-9 * bbox.step[a];
                    let f = ((r[a] - tiny - bbox.lo[a]) / bbox.step[a]).floor();
                    if f < 0.0 {
                        return None;
                    }
                    let mut i = (f as usize).min(dims[a] - 1);
                    while bbox.coord(a, i) >= r[a] {
                        if i == 0 {
                            return None;
                        }
                        i -= 1;
                    }
                    c[a] = i;
                }
                Some(shape.idx(&c))
            })
            .collect();
        for lin in slid {
            b.cells[lin] = true;
        }
        wmarks.push(b);
    }
    let dc_gamma_minus = gamma_minus.suffix_or();

    // Projected lattices and seeds.
    let proj_dims: Vec<Vec<usize>> = (0..d).map(|k| multi_without(&dims, k)).collect();
    let mut dk: Vec<Lattice> = Vec::with_capacity(d);
    for k in 0..d {
        let mut l = Lattice::new(&proj_dims[k]);
        let origins = multi_without(&bbox.origin_index, k);
        for lin in 0..l.len() {
            let m = l.decode(lin);
            l.cells[lin] = m.iter().zip(&origins).all(|(&i, &o)| i < o);
        }
        dk.push(l);
    }
    let seed_counts: Vec<usize> = dk.iter().map(|l| l.count()).collect();
    let mut growth = vec![seed_counts.clone()];

    let masks_with: Vec<Vec<u32>> = (0..d)
        .map(|k| (0..nmask as u32).filter(|m| m & (1 << k) != 0).collect())
        .collect();

    let cap = 200;
    let mut iterations = 0;
    loop {
        if iterations >= cap {
            return Err(Error::NonConvergence(format!(
                "domain iteration did not stabilize in {cap} sweeps; growth trace (last 5): {:?}",
                &growth[growth.len().saturating_sub(5)..]
            )));
        }
        iterations += 1;
        let dc_prev: Vec<Lattice> = dk.iter().map(|l| l.down_closure()).collect();
        // Condition each witness on the previous D-sets, then down-close:
        // a mark survives only if its own projections (for stations outside
        // A) lie in ←D^(n−1)_ℓ. Putting these conditions on the witness —
        // not on the dominated lift — is what keeps the region from
        // flooding: otherwise one far-out corner of Γ⁻_A would drag its
        // whole down-set in, regardless of the D-set caps.
        let cv: Vec<Lattice> = (0..nmask)
            .map(|mask| {
                let mut v = Lattice::new(&dims);
                for lin in 0..total {
                    if !wmarks[mask].cells[lin] {
                        continue;
                    }
                    let multi = shape.decode(lin);
                    v.cells[lin] = (0..d).all(|l| {
                        mask & (1 << l) != 0
                            || dc_prev[l].get(&multi_without(&multi, l))
                    });
                }
                v.suffix_or()
            })
            .collect();
        let mut next = dk.clone();
        let mut changed = false;
        for k in 0..d {
            let proj = &dk[k];
            for plin in 0..proj.len() {
                if proj.cells[plin] {
                    continue;
                }
                let pm = proj.decode(plin);
                // ←V_A is down-closed along axis k, so the bottom of the
                // lift column decides whether any lift exists.
                let mut full = vec![0usize; d];
                for (pos, a) in (0..d).filter(|&a| a != k).enumerate() {
                    full[a] = pm[pos];
                }
                full[k] = 0;
                let flin = shape.idx(&full);
                let found =
                    masks_with[k].iter().any(|&mask| cv[mask as usize].cells[flin]);
                if found {
                    next[k].cells[plin] = true;
                    changed = true;
                }
            }
        }
        dk = next;
        growth.push(dk.iter().map(|l| l.count()).collect());
        if !changed {
            break;
        }
    }

    if !dk.iter().zip(&seed_counts).any(|(l, &s)| l.count() > s) {
        return Err(Error::NonConvergence(
            "domain iteration never grew past its seed sets (trivial fixed point)".into(),
        ));
    }

    // D^(max): down-closed Γ⁻ points whose every projection lies in D_k.
    let mut dmax = Lattice::new(&dims);
    for lin in 0..total {
        if !dc_gamma_minus.cells[lin] {
            continue;
        }
        let multi = shape.decode(lin);
        dmax.cells[lin] =
            (0..d).all(|k| dk[k].get(&multi_without(&multi, k)));
    }

    // Truncation: Γ⁻ mass on a top face means the sublevel set may continue
    // past the box along that axis.
    let mut truncated_axes = bbox.truncated.clone();
    for a in 0..d {
        if truncated_axes.contains(&a) {
            continue;
        }
        let face_hit = (0..total)
            .any(|lin| gamma_minus.cells[lin] && shape.coord_of(lin, a) + 1 == dims[a]);
        if face_hit {
            truncated_axes.push(a);
        }
    }
    truncated_axes.sort_unstable();

    Ok(DomainGrid {
        bbox: bbox.clone(),
        gamma,
        gamma_minus,
        dc_gamma_minus,
        dk,
        dmax,
        iterations,
        growth,
        truncated_axes,
    })
}

// ---------------------------------------------------------------------------
// Exact two-station walls
// ---------------------------------------------------------------------------

/// The unique wall pair (α₁, α₂) of the two-station domain
/// characterization, found by alternating constrained maximization. The
/// region itself is {θ ∈ ←Γ⁻ : θ₁ < α₁, θ₂ < α₂}.
#[derive(Clone, Debug, Serialize)]
pub struct TwoDExact {
    pub alpha: [f64; 2],
    pub iterations: usize,
    pub trace: Vec<[f64; 2]>,
}

/// Largest t with γ(base + t·dir) ≤ 0, searching t ≥ 0; the slice through
/// a convex sublevel set is an interval, so the upper endpoint is found by
/// doubling + bisection. Returns None when the slice misses the set,
/// +∞ when the set never closes within the budget.
fn slice_upper_root(
    dm: &DerivedModel,
    base: &DVector<f64>,
    dir: &DVector<f64>,
    t_hi: f64,
) -> Result<Option<f64>> {
    let band = boundary_band(dm);
    let g = |t: f64| spectral::gamma_only(dm, &(base + dir * t));
    // Find any in-set t ≥ 0 by a coarse forward scan (the interval may not
    // contain t = 0).
    let mut t_in = None;
    if g(0.0)? < -band {
        t_in = Some(0.0);
    } else {
        let mut t = t_hi / 2f64.powi(30);
        while t <= t_hi {
            if g(t)? < -band {
                t_in = Some(t);
                break;
            }
            t *= 2.0;
        }
    }
    let Some(start) = t_in else { return Ok(None) };
    // Double until γ > 0.
    let mut lo = start;
    let mut hi = (start * 2.0).max(t_hi / 2f64.powi(30));
    loop {
        if hi > t_hi {
            return Ok(Some(f64::INFINITY));
        }
        let v = g(hi)?;
        if v > band {
            break;
        }
        if v < -band {
            lo = hi;
        }
        hi *= 2.0;
    }
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if g(mid)? <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// One alternation step: sup{θ_i ≥ 0 : γ(θ) ≤ 0, γ_j(θ) ≤ 0, θ_j ≤ cap}
/// for (i, j) = (free, other). Candidates: the rightmost point of a slice
/// scan (feasibility-filtered), the root along the γ_j = 0 line, the root
/// along the cap line, and the cap ∧ γ_j = 0 corner.
fn wall_sup(dm: &DerivedModel, free: usize, cap_other: f64) -> Result<f64> {
    let other = 1 - free;
    let scale = dm.rate_scale();
    let slack = 1e-9 * scale.max(1.0);
    let t_hi = 1e5 / scale;
    let gj = |theta: &DVector<f64>| -> f64 {
        (0..2).map(|a| theta[a] * dm.r[(a, other)]).sum()
    };
    let feasible = |theta: &DVector<f64>| -> bool {
        gj(theta) <= slack && theta[other] <= cap_other + slack
    };
    let e_free = {
        let mut e = DVector::zeros(2);
        e[free] = 1.0;
        e
    };
    let mut best: f64 = 0.0;

    // (i) slice scan: for each θ_other value, rightmost in-set θ_free; the
    // upper-root function of a convex set is concave in the slice variable,
    // so a coarse argmax + golden-section refinement finds its maximum.
    let span = 50.0 / scale;
    let s_lo = -span;
    let s_hi = span.min(cap_other);
    let nslice = 200;
    let eval_slice = |s: f64| -> Result<Option<f64>> {
        let mut base = DVector::zeros(2);
        base[other] = s;
        let r = slice_upper_root(dm, &base, &e_free, t_hi)?;
        Ok(r.filter(|t| t.is_finite() && *t >= 0.0).and_then(|t| {
            let mut p = base.clone();
            p[free] = t;
            if feasible(&p) {
                Some(t)
            } else {
                None
            }
        }))
    };
    let mut best_slice: Option<(usize, f64)> = None;
    for i in 0..=nslice {
        let s = s_lo + (s_hi - s_lo) * i as f64 / nslice as f64;
        if let Some(t) = eval_slice(s)? {
            if best_slice.map(|(_, bt)| t > bt).unwrap_or(true) {
                best_slice = Some((i, t));
            }
        }
    }
    if let Some((i, t0)) = best_slice {
        best = best.max(t0);
        // Golden-section refine around the best slice.
        let ds = (s_hi - s_lo) / nslice as f64;
        let mut a = s_lo + ds * (i.saturating_sub(1)) as f64;
        let mut b = (s_lo + ds * (i + 1) as f64).min(s_hi);
        let phi = 0.5 * (3.0 - 5f64.sqrt());
        for _ in 0..60 {
            let x1 = a + phi * (b - a);
            let x2 = b - phi * (b - a);
            let f1 = eval_slice(x1)?.unwrap_or(f64::NEG_INFINITY);
            let f2 = eval_slice(x2)?.unwrap_or(f64::NEG_INFINITY);
            if f1 < f2 {
                a = x1;
            } else {
                b = x2;
            }
            if b - a < 1e-11 * (1.0 + b.abs()) {
                break;
            }
        }
        if let Some(t) = eval_slice(0.5 * (a + b))? {
            best = best.max(t);
        }
    }

    // (ii) along the γ_other = 0 line through the origin (θ_free ≥ 0
    // branch), when the line is not the axis θ_free = const.
    if dm.r[(other, other)].abs() > 1e-14 {
        let mut dir = DVector::zeros(2);
        dir[free] = 1.0;
        dir[other] = -dm.r[(free, other)] / dm.r[(other, other)];
        if let Some(t) = slice_upper_root(dm, &DVector::zeros(2), &dir, t_hi)? {
            if t.is_finite() {
                let p = &dir * t;
                if feasible(&p) {
                    best = best.max(p[free]);
                }
            }
        }
    }

    // (iii) along the cap line θ_other = cap.
    if cap_other.is_finite() {
        let mut base = DVector::zeros(2);
        base[other] = cap_other;
        if let Some(t) = slice_upper_root(dm, &base, &e_free, t_hi)? {
            if t.is_finite() {
                let mut p = base.clone();
                p[free] = t;
                if feasible(&p) {
                    best = best.max(t);
                }
                // (iv) corner: cap line ∧ γ_other = 0, when γ itself
                // allows it.
                if dm.r[(free, other)].abs() > 1e-14 {
                    let tf = -cap_other * dm.r[(other, other)] / dm.r[(free, other)];
                    if tf > 0.0 && tf <= t + slack {
                        let mut q = base.clone();
                        q[free] = tf;
                        if spectral::gamma_only(dm, &q)? <= slack && feasible(&q) {
                            best = best.max(tf);
                        }
                    }
                }
            }
        }
    }
    Ok(best)
}

/// Solves the two-station wall equations by alternating maximization from
/// (0, 0); each coordinate sup is nondecreasing in the other's cap, so the
/// alternation is monotone and converges to the unique fixed pair.
pub fn two_d_exact(dm: &DerivedModel) -> Result<TwoDExact> {
    if dm.d() != 2 {
        return Err(Error::Precondition("exact walls require a two-station model".into()));
    }
    let (stable, _) = traffic::is_stable(dm)?;
    if !stable {
        return Err(Error::Precondition(
            "model is unstable; decay-rate domains are undefined".into(),
        ));
    }
    // Each wall_sup is reproducible only to ~1e-8 (scan + golden-section
    // jitter), so a tighter stopping threshold leaves the alternation
    // oscillating at that noise floor forever; the iteration itself
    // contracts in one or two passes.
    let tol = 1e-7;
    let mut alpha = [0.0f64; 2];
    let mut trace = vec![alpha];
    for it in 1..=200 {
        let a1 = wall_sup(dm, 0, alpha[1])?;
        let a2 = wall_sup(dm, 1, a1)?;
        let delta = (a1 - alpha[0]).abs().max((a2 - alpha[1]).abs());
        alpha = [a1, a2];
        trace.push(alpha);
        if delta <= tol * (1.0 + a1.abs().max(a2.abs())) {
            return Ok(TwoDExact { alpha, iterations: it, trace });
        }
    }
    Err(Error::NonConvergence(format!(
        "wall alternation did not settle; last pair {alpha:?}"
    )))
}

// ---------------------------------------------------------------------------
// Decay-rate bounds
// ---------------------------------------------------------------------------

fn check_direction(dm: &DerivedModel, c: &DVector<f64>) -> Result<DVector<f64>> {
    if c.len() != dm.d() {
        return Err(Error::Parse("direction dimension does not match the model".into()));
    }
    if c.iter().any(|&x| x < 0.0) {
        return Err(Error::Precondition("direction must be nonnegative".into()));
    }
    let n = c.norm();
    if n <= 0.0 {
        return Err(Error::Precondition("direction must be nonzero".into()));
    }
    Ok(c / n)
}

/// Snaps a ray point u·c to the nearest lattice multi-index; None when out
/// of the box.
fn snap(bbox: &BoundingBox, c: &DVector<f64>, u: f64) -> Option<Vec<usize>> {
    let d = bbox.d();
    let mut multi = vec![0usize; d];
    for a in 0..d {
        let idx = (u * c[a] / bbox.step[a]).round() as i64 + bbox.origin_index[a] as i64;
        if idx < 0 || idx as usize >= bbox.npts(a) {
            return None;
        }
        multi[a] = idx as usize;
    }
    Some(multi)
}

/// Scans u ≥ 0 along the snapped ray through a lattice set. Returns the
/// ray coordinate ⟨θ, c⟩ of the last in-set lattice point θ (so the value
/// never exceeds any ⟨·, c⟩-supremum over the same set, which the marching
/// parameter itself could by up to half a cell), whether the ray left the
/// box while still in the set, and that point's multi-index.
fn ray_exit(bbox: &BoundingBox, set: &Lattice, c: &DVector<f64>) -> (f64, bool, Vec<usize>) {
    let du = 0.5 * bbox.step.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut u = 0.0;
    let mut last_multi = snap(bbox, c, 0.0).unwrap_or_default();
    let mut in_at_edge = false;
    loop {
        match snap(bbox, c, u) {
            Some(multi) => {
                let inside = set.get(&multi);
                if inside {
                    last_multi = multi;
                    in_at_edge = true;
                } else {
                    in_at_edge = false;
                }
            }
            None => break,
        }
        u += du;
    }
    let last_in = if last_multi.is_empty() {
        0.0
    } else {
        (0..bbox.d()).map(|a| bbox.coord(a, last_multi[a]) * c[a]).sum()
    };
    (last_in, in_at_edge, last_multi)
}

/// Directional bounds read from D^(max): the ray bound
/// sup{u ≥ 0 : u·c ∈ D^(max)} and the hyperplane bound
/// sup{⟨θ, c⟩ : θ ∈ D^(max)}, each with a one-cell error bar and a
/// box-limited flag.
#[derive(Clone, Debug, Serialize)]
pub struct UpperBound {
    pub ray: f64,
    pub ray_error: f64,
    pub ray_box_limited: bool,
    pub hyperplane: f64,
    pub hyperplane_error: f64,
    pub hyperplane_box_limited: bool,
}

pub fn upper_decay_rate(
    dm: &DerivedModel,
    c: &DVector<f64>,
    grid: &DomainGrid,
) -> Result<UpperBound> {
    let c = check_direction(dm, c)?;
    let bbox = &grid.bbox;
    let d = bbox.d();
    let (ray, ray_box_limited, _) = ray_exit(bbox, &grid.dmax, &c);
    let ray_error = bbox.step.iter().cloned().fold(0.0, f64::max);

    let mut hyper = 0.0f64;
    let mut arg: Option<Vec<usize>> = None;
    let shape = Lattice::new(&bbox.dims());
    for lin in 0..grid.dmax.len() {
        if !grid.dmax.cells[lin] {
            continue;
        }
        let multi = shape.decode(lin);
        let val: f64 = (0..d).map(|a| bbox.coord(a, multi[a]) * c[a]).sum();
        if arg.is_none() || val > hyper {
            hyper = val;
            arg = Some(multi);
        }
    }
    let hyperplane_error: f64 = (0..d).map(|a| bbox.step[a] * c[a]).sum();
    let on_face = arg
        .map(|m| (0..d).any(|a| c[a] > 1e-12 && m[a] + 1 == bbox.npts(a)))
        .unwrap_or(false);
    let truncated_dir =
        grid.truncated_axes.iter().any(|&a| c[a] > 1e-12);
    Ok(UpperBound {
        ray,
        ray_error,
        ray_box_limited,
        hyperplane: hyper.max(0.0),
        hyperplane_error,
        hyperplane_box_limited: on_face || truncated_dir,
    })
}

/// Coordinate bound: inf{θ_k ≥ 0 : θ ∈ G_k}, where G_k collects points
/// with γ > 0, γ_ℓ ≥ 0 and ∂γ/∂θ_ℓ < 0 for every ℓ ≠ k, and station-k
/// drift [R⁻¹∇γ]_k > 0. `value` is None when G_k has no lattice point in
/// the box: the infimum over the searched region is vacuous and no finite
/// bound is certified.
#[derive(Clone, Debug, Serialize)]
pub struct CoordinateLower {
    pub station: usize,
    pub value: Option<f64>,
    /// A feasible witness point (refined along axis k).
    pub theta: Option<Vec<f64>>,
}

/// Full G_k feasibility test at θ; needs eigenvectors, so it is the
/// expensive predicate and callers prefilter by γ and γ_ℓ signs.
fn g_k_feasible(dm: &DerivedModel, k: usize, theta: &DVector<f64>) -> Result<Option<SpectralPoint>> {
    let band = boundary_band(dm);
    let sp = spectral::perron(dm, theta)?;
    if sp.gamma <= band {
        return Ok(None);
    }
    let gk = spectral::gamma_k(dm, theta);
    for l in 0..dm.d() {
        if l == k {
            continue;
        }
        if gk[l] < -band || sp.grad[l] >= 0.0 {
            return Ok(None);
        }
    }
    let drift_k = (dm.r_inv.row(k) * &sp.grad)[0];
    if drift_k <= 0.0 {
        return Ok(None);
    }
    Ok(Some(sp))
}

pub fn lower_decay_rate_coordinate(
    dm: &DerivedModel,
    k: usize,
    grid: &DomainGrid,
) -> Result<CoordinateLower> {
    if k >= dm.d() {
        return Err(Error::Parse(format!("station index {k} out of range")));
    }
    let band = boundary_band(dm);
    let bbox = &grid.bbox;
    let d = bbox.d();
    let shape = Lattice::new(&bbox.dims());
    // Scan columns in increasing θ_k starting at the origin index; the
    // first feasible lattice point gives the grid infimum.
    let mut found: Option<(Vec<usize>, DVector<f64>)> = None;
    'scan: for j in bbox.origin_index[k]..bbox.npts(k) {
        for lin in 0..shape.len() {
            if shape.coord_of(lin, k) != j {
                continue;
            }
            if grid.gamma[lin] <= band {
                continue;
            }
            let multi = shape.decode(lin);
            let theta = bbox.point(&multi);
            let gk_all = spectral::gamma_k(dm, &theta);
            if (0..d).any(|l| l != k && gk_all[l] < -band) {
                continue;
            }
            if g_k_feasible(dm, k, &theta)?.is_some() {
                found = Some((multi, theta));
                break 'scan;
            }
        }
    }
    let Some((multi, theta)) = found else {
        return Ok(CoordinateLower { station: k, value: None, theta: None });
    };
    // Bisection refinement along axis k below the found point.
    let mut hi = theta[k];
    let mut lo = (hi - bbox.step[k]).max(0.0);
    let mut witness = theta.clone();
    for _ in 0..60 {
        if hi - lo <= 1e-10 * (1.0 + hi) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let mut t = theta.clone();
        t[k] = mid;
        if g_k_feasible(dm, k, &t)?.is_some() {
            hi = mid;
            witness = t;
        } else {
            lo = mid;
        }
    }
    let _ = multi;
    Ok(CoordinateLower {
        station: k,
        value: Some(hi),
        theta: Some(witness.iter().copied().collect()),
    })
}

/// The directional membership certificate: the positive root u* of
/// γ(u·c) (unique by convexity) and whether the root point sits on the
/// reachable part of the boundary, i.e. some partial derivative of γ is
/// negative there so the strict NE cone re-enters the sublevel set.
#[derive(Clone, Debug, Serialize)]
pub struct CornCertificate {
    pub root: Option<f64>,
    pub corn: bool,
    pub grad_at_root: Option<Vec<f64>>,
}

pub fn corn_certificate(dm: &DerivedModel, c: &DVector<f64>) -> Result<CornCertificate> {
    let c = check_direction(dm, c)?;
    let scale = dm.rate_scale();
    let root = ray_gamma_root(dm, &c, 1e5 / scale)?;
    let Some(u) = root else {
        return Ok(CornCertificate { root: None, corn: false, grad_at_root: None });
    };
    let sp = spectral::perron(dm, &(&c * u))?;
    let corn = sp.grad.iter().any(|&g| g < 0.0);
    Ok(CornCertificate {
        root: Some(u),
        corn,
        grad_at_root: Some(sp.grad.iter().copied().collect()),
    })
}

/// Directional bound from the reachable-boundary side:
/// sup{u ≥ 0 : u·c ∈ ←Γ⁻} on the lattice, reported together with the root
/// certificate. `box_limited` is set when the ray leaves the box while
/// still inside ←Γ⁻, or when Γ⁻ mass on a top face dominates the exit
/// point (so the true exit may lie beyond the box).
#[derive(Clone, Debug, Serialize)]
pub struct DirectionLower {
    pub value: f64,
    pub gamma_root: f64,
    pub box_limited: bool,
}

pub fn lower_decay_rate_direction(
    dm: &DerivedModel,
    c: &DVector<f64>,
    grid: &DomainGrid,
) -> Result<DirectionLower> {
    let c = check_direction(dm, c)?;
    let cert = corn_certificate(dm, &c)?;
    let (Some(root), true) = (cert.root, cert.corn) else {
        return Err(Error::Precondition(
            "direction outside the corn region: no reachable boundary crossing, no bound emitted"
                .into(),
        ));
    };
    let bbox = &grid.bbox;
    let d = bbox.d();
    let (value, exited_in_set, exit_multi) = ray_exit(bbox, &grid.dc_gamma_minus, &c);
    // Top-face Γ⁻ mass strictly NE of the exit point.
    let shape = Lattice::new(&bbox.dims());
    let mut face = Lattice::new(&bbox.dims());
    for lin in 0..face.len() {
        face.cells[lin] = grid.gamma_minus.cells[lin]
            && (0..d).any(|a| shape.coord_of(lin, a) + 1 == bbox.npts(a));
    }
    let suf = face.suffix_or();
    let dominated = {
        let mut m = exit_multi.clone();
        let mut ok = true;
        for a in 0..d {
            m[a] += 1;
            if m[a] >= bbox.npts(a) {
                ok = false;
                break;
            }
        }
        ok && suf.get(&m)
    };
    Ok(DirectionLower {
        value,
        gamma_root: root,
        box_limited: exited_in_set || dominated,
    })
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

/// Streams the full lattice as CSV: coordinates, γ, and membership flags.
pub fn write_domain_csv<W: Write>(grid: &DomainGrid, w: &mut W) -> io::Result<()> {
    let bbox = &grid.bbox;
    let d = bbox.d();
    let shape = Lattice::new(&bbox.dims());
    for a in 0..d {
        write!(w, "theta{},", a + 1)?;
    }
    writeln!(w, "gamma,in_gamma_minus,in_dc_gamma_minus,in_dmax")?;
    for lin in 0..shape.len() {
        let multi = shape.decode(lin);
        for a in 0..d {
            write!(w, "{:.16e},", bbox.coord(a, multi[a]))?;
        }
        writeln!(
            w,
            "{:.16e},{},{},{}",
            grid.gamma[lin],
            grid.gamma_minus.cells[lin] as u8,
            grid.dc_gamma_minus.cells[lin] as u8,
            grid.dmax.cells[lin] as u8
        )?;
    }
    Ok(())
}

/// Boundary point cloud of D^(max): set points with an unset upper
/// neighbor along some axis (or sitting on the box face).
pub fn dmax_boundary(grid: &DomainGrid) -> Vec<Vec<f64>> {
    let bbox = &grid.bbox;
    let d = bbox.d();
    let shape = Lattice::new(&bbox.dims());
    let mut out = Vec::new();
    for lin in 0..shape.len() {
        if !grid.dmax.cells[lin] {
            continue;
        }
        let multi = shape.decode(lin);
        let on_edge = (0..d).any(|a| {
            if multi[a] + 1 == bbox.npts(a) {
                return true;
            }
            let mut up = multi.clone();
            up[a] += 1;
            !grid.dmax.get(&up)
        });
        if on_edge {
            out.push((0..d).map(|a| bbox.coord(a, multi[a])).collect());
        }
    }
    out
}
