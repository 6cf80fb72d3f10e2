//! End-to-end analyses shared by the command-line front end and the
//! integration tests: grid construction, decay-rate reports per station and
//! direction, and the verification pipeline that compares the analytic
//! bracket against simulation.
//!
//! Report conventions: a decay rate is the logarithmic tail exponent
//! −lim (1/x)·log P(⟨c,Z⟩ > x). Fields named `rate_min_*` are certified
//! floors (the tail decays at least this fast, from domain membership);
//! fields named `rate_max_*` are certified caps (it decays at most this
//! fast, from boundary-crossing and feasible-set arguments). Station and
//! axis indices in reports are 1-based to match table and CSV labels;
//! everything internal stays 0-based.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    auto_box, corn_certificate, fixed_point_iteration, lower_decay_rate_coordinate,
    lower_decay_rate_direction, two_d_exact, upper_decay_rate, BoundingBox, DomainGrid, Lattice,
};
use crate::model::DerivedModel;
use crate::simulator::{
    default_burn_in, estimate_bar_residual, estimate_tails, martingale_check, BarResidual,
    MartingaleCheck, TailEstimate,
};
use crate::traffic;

/// Default RNG seed used by every command when none is given.
pub const DEFAULT_SEED: u64 = 0x4D4D_464E;

/// Grid request: auto-sized box unless explicit bounds are given.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cells per axis.
    pub resolution: usize,
    /// Explicit box bounds; both or neither.
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { resolution: 120, lo: None, hi: None }
    }
}

/// Builds the lattice domain: auto-box (or the explicit override) followed
/// by the fixed-point iteration.
pub fn build_grid(dm: &DerivedModel, spec: &GridSpec) -> Result<DomainGrid> {
    let bbox = match (&spec.lo, &spec.hi) {
        (Some(lo), Some(hi)) => {
            BoundingBox::with_bounds(lo, hi, &vec![spec.resolution.max(4); dm.d()])?
        }
        (None, None) => auto_box(dm, spec.resolution)?,
        _ => {
            return Err(Error::Parse(
                "box override needs both lower and upper bounds".into(),
            ))
        }
    };
    fixed_point_iteration(dm, &bbox)
}

/// Decay-rate bracket for one station's buffer (direction e_k).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationReport {
    /// 1-based station number.
    pub station: usize,
    pub rate_min_ray: f64,
    pub rate_min_ray_error: f64,
    pub rate_min_ray_box_limited: bool,
    pub rate_min_hyperplane: f64,
    pub rate_min_hyperplane_error: f64,
    pub rate_min_hyperplane_box_limited: bool,
    /// Cap from the boundary-crossing bound along e_k; absent when the
    /// crossing certificate fails or the box truncates it.
    pub rate_max_crossing: Option<f64>,
    /// Cap from the feasible-set bound inf{θ_k : θ ∈ G_k}; absent when G_k
    /// has no lattice point in the box.
    pub rate_max_coordinate: Option<f64>,
    pub gamma_axis_root: Option<f64>,
}

/// Decay-rate bracket for an arbitrary nonnegative direction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionReport {
    /// Unit-normalized direction.
    pub direction: Vec<f64>,
    pub rate_min_ray: f64,
    pub rate_min_ray_error: f64,
    pub rate_min_ray_box_limited: bool,
    pub rate_min_hyperplane: f64,
    pub rate_min_hyperplane_error: f64,
    pub rate_min_hyperplane_box_limited: bool,
    pub rate_max_crossing: Option<f64>,
    pub gamma_root: Option<f64>,
    /// Whether the root point sits on the reachable part of the boundary.
    pub corn: bool,
}

/// Full analytic report: grid summary, per-station brackets, requested
/// directions, and (for two stations) the exact wall pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayReport {
    pub drift: Vec<f64>,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub cells: Vec<usize>,
    /// 1-based axes where the box truncates the sublevel set.
    pub truncated_axes: Vec<usize>,
    pub iterations: usize,
    pub dmax_points: usize,
    pub stations: Vec<StationReport>,
    pub directions: Vec<DirectionReport>,
    /// d = 2 only: the exact wall pair (α₁, α₂).
    pub exact_walls: Option<Vec<f64>>,
}

fn unit(d: usize, k: usize) -> DVector<f64> {
    let mut e = DVector::zeros(d);
    e[k] = 1.0;
    e
}

/// All-ones diagonal direction, unit-normalized.
pub fn diagonal_direction(d: usize) -> DVector<f64> {
    DVector::from_element(d, 1.0 / (d as f64).sqrt())
}

fn max_step(bbox: &BoundingBox) -> f64 {
    bbox.step.iter().cloned().fold(0.0, f64::max)
}

/// Directional bracket pieces shared by stations and free directions.
fn direction_report(
    dm: &DerivedModel,
    c: &DVector<f64>,
    grid: &DomainGrid,
) -> Result<DirectionReport> {
    let ub = upper_decay_rate(dm, c, grid)?;
    let cert = corn_certificate(dm, c)?;
    let crossing = if cert.corn && cert.root.is_some() {
        let dl = lower_decay_rate_direction(dm, c, grid)?;
        if dl.box_limited {
            None
        } else {
            Some(dl.value + max_step(&grid.bbox))
        }
    } else {
        None
    };
    Ok(DirectionReport {
        direction: c.iter().copied().collect(),
        rate_min_ray: ub.ray,
        rate_min_ray_error: ub.ray_error,
        rate_min_ray_box_limited: ub.ray_box_limited,
        rate_min_hyperplane: ub.hyperplane,
        rate_min_hyperplane_error: ub.hyperplane_error,
        rate_min_hyperplane_box_limited: ub.hyperplane_box_limited,
        rate_max_crossing: crossing,
        gamma_root: cert.root,
        corn: cert.corn,
    })
}

/// Assembles the full analytic report from a computed grid.
pub fn compute_bounds(
    dm: &DerivedModel,
    grid: &DomainGrid,
    extra_directions: &[DVector<f64>],
) -> Result<DecayReport> {
    let d = dm.d();
    let (_, drift) = traffic::is_stable(dm)?;
    let mut stations = Vec::with_capacity(d);
    for k in 0..d {
        let e = unit(d, k);
        let dir = direction_report(dm, &e, grid)?;
        let coord = lower_decay_rate_coordinate(dm, k, grid)?;
        stations.push(StationReport {
            station: k + 1,
            rate_min_ray: dir.rate_min_ray,
            rate_min_ray_error: dir.rate_min_ray_error,
            rate_min_ray_box_limited: dir.rate_min_ray_box_limited,
            rate_min_hyperplane: dir.rate_min_hyperplane,
            rate_min_hyperplane_error: dir.rate_min_hyperplane_error,
            rate_min_hyperplane_box_limited: dir.rate_min_hyperplane_box_limited,
            rate_max_crossing: dir.rate_max_crossing,
            rate_max_coordinate: coord.value,
            gamma_axis_root: dir.gamma_root,
        });
    }
    let mut directions = Vec::with_capacity(extra_directions.len());
    for c in extra_directions {
        directions.push(direction_report(dm, c, grid)?);
    }
    let exact_walls = if d == 2 {
        Some(two_d_exact(dm)?.alpha.to_vec())
    } else {
        None
    };
    Ok(DecayReport {
        drift: drift.iter().copied().collect(),
        box_lo: grid.bbox.lo.clone(),
        box_hi: grid.bbox.hi.clone(),
        cells: grid.bbox.cells.clone(),
        truncated_axes: grid.truncated_axes.iter().map(|&a| a + 1).collect(),
        iterations: grid.iterations,
        dmax_points: grid.dmax.count(),
        stations,
        directions,
        exact_walls,
    })
}

// ---------------------------------------------------------------------------
// Interior-point selection
// ---------------------------------------------------------------------------

/// Fractions of the positive-diagonal extent at which verification θ points
/// are placed; the negative entry adds one point in the bounded (θ ≤ 0)
/// part of the domain.
pub const DEFAULT_INTERIOR_FRACTIONS: [f64; 5] = [0.85, 0.65, 0.45, 0.25, -0.6];

fn snap_multi(bbox: &BoundingBox, theta: &DVector<f64>) -> Option<Vec<usize>> {
    let d = bbox.d();
    let mut multi = vec![0usize; d];
    for a in 0..d {
        let f = (theta[a] - bbox.lo[a]) / bbox.step[a];
        let r = f.round();
        if r < 0.0 || r > bbox.cells[a] as f64 {
            return None;
        }
        multi[a] = r as usize;
    }
    Some(multi)
}

/// Deterministic interior lattice points of D^(max), one per fraction of
/// the lattice exit along the positive-extent diagonal. Each candidate is
/// snapped to the lattice and, if the snapped point fell outside the set,
/// walked coordinatewise toward the origin until membership holds (it must,
/// since D^(max) is a down-set around the seeded region); fractions whose
/// walk fails are skipped. Duplicates after snapping are dropped.
pub fn interior_points(
    dm: &DerivedModel,
    grid: &DomainGrid,
    fractions: &[f64],
) -> Result<Vec<DVector<f64>>> {
    let bbox = &grid.bbox;
    let d = bbox.d();
    let shape = Lattice::new(&bbox.dims());
    // Positive extent of D^(max) per axis.
    let mut ext = vec![0.0f64; d];
    for lin in 0..grid.dmax.len() {
        if !grid.dmax.cells[lin] {
            continue;
        }
        let multi = shape.decode(lin);
        for a in 0..d {
            ext[a] = ext[a].max(bbox.coord(a, multi[a]));
        }
    }
    let mut c = DVector::from_vec(ext);
    if c.norm() <= 0.0 {
        c = diagonal_direction(d);
    } else {
        c /= c.norm();
    }
    let u_exit = upper_decay_rate(dm, &c, grid)?.ray;
    if u_exit <= 0.0 {
        return Err(Error::Precondition(
            "the domain grid has no positive interior along its own extent; refine the box".into(),
        ));
    }

    let mut seen: Vec<Vec<usize>> = Vec::new();
    let mut points = Vec::new();
    for &s in fractions {
        let target = &c * (s * u_exit);
        let Some(mut multi) = snap_multi(bbox, &target) else {
            continue;
        };
        // Walk toward the origin until the point is in the set.
        loop {
            if grid.dmax.get(&multi) {
                if !seen.contains(&multi) {
                    seen.push(multi.clone());
                    points.push(bbox.point(&multi));
                }
                break;
            }
            // Step the axis farthest from the origin index one cell inward.
            let far = (0..d)
                .max_by_key(|&a| multi[a].abs_diff(bbox.origin_index[a]))
                .expect("d ≥ 2");
            if multi[far] == bbox.origin_index[far] {
                break;
            }
            if multi[far] > bbox.origin_index[far] {
                multi[far] -= 1;
            } else {
                multi[far] += 1;
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Precondition(
            "no interior lattice point of the domain found; refine the box".into(),
        ));
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Verification pipeline
// ---------------------------------------------------------------------------

/// Budget and determinism knobs for [`verify`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub resolution: usize,
    /// Replications and horizon for the tail fits.
    pub reps: usize,
    pub horizon: f64,
    /// Burn-in; defaults to twenty relaxation times, clamped to a quarter
    /// of the horizon.
    pub burn_in: Option<f64>,
    /// Number of tail levels per direction (auto-scaled ladder).
    pub levels: usize,
    /// Explicit levels used for every direction instead of the ladder.
    pub levels_override: Option<Vec<f64>>,
    pub seed: u64,
    /// Budget for the stationary-identity residual check.
    pub bar_reps: usize,
    pub bar_horizon: f64,
    /// Budget for the martingale-mean check.
    pub mart_reps: usize,
    pub mart_t: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            resolution: 120,
            reps: 64,
            horizon: 8000.0,
            burn_in: None,
            levels: 8,
            levels_override: None,
            seed: DEFAULT_SEED,
            bar_reps: 48,
            bar_horizon: 2500.0,
            mart_reps: 2000,
            mart_t: 10.0,
        }
    }
}

/// One direction's bracket test: analytic floor and cap against the fitted
/// simulation rate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BracketCheck {
    pub direction: Vec<f64>,
    /// Analytic floor (grid ray bound minus one cell, clamped at 0).
    pub rate_min: f64,
    /// Analytic cap; absent means no finite cap is certified.
    pub rate_max: Option<f64>,
    pub fitted: Option<f64>,
    pub fitted_stderr: Option<f64>,
    pub used_levels: usize,
    /// "pass": point estimate inside [rate_min, rate_max];
    /// "inconclusive": outside, but the ±3·stderr interval still reaches
    /// the bracket (or no usable fit);
    /// "fail": the ±3·stderr interval lies entirely outside.
    pub verdict: String,
}

/// Combined verification report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub resolution: usize,
    pub reps: usize,
    pub horizon: f64,
    pub burn_in: f64,
    pub brackets: Vec<BracketCheck>,
    pub tails: Vec<TailEstimate>,
    /// θ used for the stationary-identity and martingale checks.
    pub check_theta: Vec<f64>,
    pub bar: BarResidual,
    pub bar_pass: bool,
    pub martingale: MartingaleCheck,
    pub martingale_pass: bool,
    pub pass: bool,
}

fn bracket_verdict(
    rate_min: f64,
    rate_max: Option<f64>,
    fitted: Option<f64>,
    se: Option<f64>,
) -> String {
    let (Some(r), Some(se)) = (fitted, se) else {
        return "inconclusive".into();
    };
    let hi = rate_max.unwrap_or(f64::INFINITY);
    if r >= rate_min && r <= hi {
        return "pass".into();
    }
    if r + 3.0 * se >= rate_min && r - 3.0 * se <= hi {
        return "inconclusive".into();
    }
    "fail".into()
}

/// Runs the full cross-validation: analytic brackets in every axis
/// direction plus the diagonal, one shared set of tail replications, the
/// stationary-identity residual at an interior θ, and the martingale mean.
///
/// The three stochastic stages draw from distinct seed offsets
/// (`seed`, `seed+1`, `seed+2`) so their replication streams never overlap.
pub fn verify(dm: &DerivedModel, cfg: &VerifyConfig) -> Result<VerifyReport> {
    let d = dm.d();
    let (stable, _) = traffic::is_stable(dm)?;
    if !stable {
        return Err(Error::Precondition(
            "model is unstable; there is no stationary tail to verify".into(),
        ));
    }
    if cfg.levels < 2 {
        return Err(Error::Precondition("need at least 2 tail levels".into()));
    }
    let grid = build_grid(dm, &GridSpec { resolution: cfg.resolution, lo: None, hi: None })?;
    let burn_in = match cfg.burn_in {
        Some(b) => b,
        None => default_burn_in(dm)?.min(0.25 * cfg.horizon),
    };

    // Directions and their level ladders: the deepest level targets an
    // exceedance probability around 5·10⁻⁵ under the floor rate.
    let mut dirs: Vec<DVector<f64>> = (0..d).map(|k| unit(d, k)).collect();
    dirs.push(diagonal_direction(d));
    let mut reports = Vec::with_capacity(dirs.len());
    let mut requests = Vec::with_capacity(dirs.len());
    for c in &dirs {
        let rep = direction_report(dm, c, &grid)?;
        let levels = match &cfg.levels_override {
            Some(lv) => lv.clone(),
            None => {
                let r_ref = rep.rate_min_ray.max(rep.rate_min_ray_error);
                let x_max = (2.0e4f64).ln() / r_ref;
                (1..=cfg.levels).map(|i| x_max * i as f64 / cfg.levels as f64).collect()
            }
        };
        requests.push((c.clone(), levels));
        reports.push(rep);
    }
    let tails = estimate_tails(dm, &requests, cfg.reps, cfg.horizon, burn_in, cfg.seed)?;

    let mut brackets = Vec::with_capacity(dirs.len());
    for (i, rep) in reports.iter().enumerate() {
        let rate_min = (rep.rate_min_ray - rep.rate_min_ray_error).max(0.0);
        // Cap: boundary-crossing bound, tightened by the coordinate bound
        // on axis directions when available.
        let mut rate_max = rep.rate_max_crossing;
        if i < d {
            if let Some(cv) = lower_decay_rate_coordinate(dm, i, &grid)?.value {
                rate_max = Some(rate_max.map_or(cv, |r: f64| r.min(cv)));
            }
        }
        let est = &tails[i];
        let verdict = bracket_verdict(rate_min, rate_max, est.rate, est.rate_stderr);
        brackets.push(BracketCheck {
            direction: rep.direction.clone(),
            rate_min,
            rate_max,
            fitted: est.rate,
            fitted_stderr: est.rate_stderr,
            used_levels: est.used.iter().filter(|&&u| u).count(),
            verdict,
        });
    }

    // Interior θ for the stationary checks: a solidly positive point.
    let theta = interior_points(dm, &grid, &[0.55, 0.4, 0.25])?
        .into_iter()
        .next()
        .expect("interior_points errors rather than returning empty");
    let bar_burn = burn_in.min(0.25 * cfg.bar_horizon);
    let bar =
        estimate_bar_residual(dm, &theta, cfg.bar_reps, cfg.bar_horizon, bar_burn, cfg.seed + 1)?;
    let bar_pass = bar.residual.abs() <= 3.0 * bar.residual_stderr.max(1e-15);
    let martingale = martingale_check(dm, &theta, cfg.mart_t, cfg.mart_reps, cfg.seed + 2)?;
    let martingale_pass =
        martingale.valid && (martingale.mean - 1.0).abs() <= 3.0 * martingale.stderr.max(1e-15);

    let pass = brackets.iter().all(|b| b.verdict != "fail") && bar_pass && martingale_pass;
    Ok(VerifyReport {
        seed: cfg.seed,
        resolution: cfg.resolution,
        reps: cfg.reps,
        horizon: cfg.horizon,
        burn_in,
        brackets,
        tails,
        check_theta: theta.iter().copied().collect(),
        bar,
        bar_pass,
        martingale,
        martingale_pass,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_models::{feed2, par2, tandem2};

    #[test]
    fn bounds_report_brackets_the_known_walls() {
        let dm = par2();
        let grid = build_grid(&dm, &GridSpec { resolution: 120, lo: None, hi: None }).unwrap();
        let report = compute_bounds(&dm, &grid, &[diagonal_direction(2)]).unwrap();
        let walls = [43.0 / 12.0, 14.0 / 9.0];
        let exact = report.exact_walls.as_ref().unwrap();
        for k in 0..2 {
            assert!((exact[k] - walls[k]).abs() < 1e-6);
            let st = &report.stations[k];
            assert_eq!(st.station, k + 1);
            let cell = 2.0 * grid.bbox.step[k];
            // Floor below the wall, within two cells.
            assert!(st.rate_min_ray <= walls[k] + 1e-9);
            assert!(st.rate_min_ray >= walls[k] - cell - 1e-9, "ray {}", st.rate_min_ray);
            // Decoupled stations: the feasible-set cap exists and pins the
            // wall from above.
            let cap = st.rate_max_coordinate.expect("G_k nonempty for decoupled stations");
            assert!(cap >= walls[k] - cell && cap <= walls[k] + cell, "cap {cap}");
            // Axis crossing root equals the wall here.
            assert!((st.gamma_axis_root.unwrap() - walls[k]).abs() < 1e-6);
        }
        // Total-content direction: the free flow drains at a constant rate
        // in every background state, so γ never crosses zero along the
        // diagonal and no cap is certified.
        let diag = &report.directions[0];
        assert!(diag.gamma_root.is_none());
        assert!(!diag.corn);
        assert!(diag.rate_max_crossing.is_none());
        // The diagonal ray leaves D^(max) at the station-2 wall, well inside
        // the box: θ = (u/√2)𝟙 stays in the domain until θ₂ reaches α₂.
        let diag_exit = 2f64.sqrt() * walls[1];
        assert!(!diag.rate_min_ray_box_limited);
        assert!(diag.rate_min_ray <= diag_exit + 1e-9, "ray {}", diag.rate_min_ray);
        assert!(
            diag.rate_min_ray >= diag_exit - 2.0 * (grid.bbox.step[0] + grid.bbox.step[1]),
            "ray {} vs exit {diag_exit}",
            diag.rate_min_ray
        );
        assert_eq!(report.dmax_points, grid.dmax.count());
    }

    #[test]
    fn interior_points_are_dmax_lattice_points() {
        let dm = tandem2();
        let grid = build_grid(&dm, &GridSpec { resolution: 80, lo: None, hi: None }).unwrap();
        let pts = interior_points(&dm, &grid, &DEFAULT_INTERIOR_FRACTIONS).unwrap();
        assert!(pts.len() >= 3, "got {} points", pts.len());
        for p in &pts {
            let multi = snap_multi(&grid.bbox, p).expect("inside the box");
            assert!(grid.dmax.get(&multi), "point {p} not in the grid domain");
            // Snapping is exact: the point IS a lattice point.
            let back = grid.bbox.point(&multi);
            assert!((p - back).amax() < 1e-12);
        }
        // At least one point in the bounded negative part, at least one
        // positive.
        assert!(pts.iter().any(|p| p.iter().all(|&x| x <= 0.0)));
        assert!(pts.iter().any(|p| p.iter().any(|&x| x > 0.0)));
    }

    #[test]
    fn verify_is_deterministic_and_structured() {
        let dm = feed2();
        let cfg = VerifyConfig {
            resolution: 60,
            reps: 12,
            horizon: 600.0,
            burn_in: None,
            levels: 5,
            levels_override: None,
            seed: 7,
            bar_reps: 6,
            bar_horizon: 200.0,
            mart_reps: 24,
            mart_t: 4.0,
        };
        let a = verify(&dm, &cfg).unwrap();
        let b = verify(&dm, &cfg).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb, "same config must give byte-identical reports");
        // Round-trip: parse and re-render identically.
        let back: VerifyReport = serde_json::from_str(&ja).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), ja);

        assert_eq!(a.brackets.len(), 3);
        assert_eq!(a.tails.len(), 3);
        for bc in &a.brackets {
            assert!(bc.rate_min >= 0.0);
            if let Some(max) = bc.rate_max {
                assert!(bc.rate_min <= max + 1e-12, "inverted bracket {} > {max}", bc.rate_min);
            }
            assert!(["pass", "fail", "inconclusive"].contains(&bc.verdict.as_str()));
        }
        assert!(a.burn_in <= 0.25 * cfg.horizon + 1e-12);
        assert_eq!(a.check_theta.len(), 2);
        // The checks at this tiny budget must at least be self-consistent.
        assert!(a.martingale.reps == 24);
        assert!(a.bar.reps == 6);
    }

    #[test]
    fn verify_refuses_unstable_models() {
        use crate::model::{derive, MmfnModel};
        use nalgebra::DMatrix;
        let m = MmfnModel::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[3.0, 3.0, 1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
        )
        .unwrap();
        let dm = derive(m).unwrap();
        let err = verify(&dm, &VerifyConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn explicit_box_override_is_respected() {
        let dm = par2();
        let spec = GridSpec {
            resolution: 40,
            lo: Some(vec![-2.0, -2.0]),
            hi: Some(vec![4.0, 2.0]),
        };
        let grid = build_grid(&dm, &spec).unwrap();
        assert_eq!(grid.bbox.cells, vec![40, 40]);
        // Origin snapping may shift the requested face by at most half a
        // cell in either direction.
        assert!(
            (grid.bbox.hi[0] - 4.0).abs() <= 0.5 * grid.bbox.step[0] + 1e-12,
            "hi {} vs requested 4.0 (step {})",
            grid.bbox.hi[0],
            grid.bbox.step[0]
        );
        let bad = GridSpec { resolution: 40, lo: Some(vec![-2.0, -2.0]), hi: None };
        assert_eq!(build_grid(&dm, &bad).unwrap_err().exit_code(), 3);
    }
}
