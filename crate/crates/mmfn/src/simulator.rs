//! Exact event-driven simulation of the reflected (and partially reflected)
//! fluid network, plus Monte-Carlo estimators for tail probabilities,
//! stationary moment-identity residuals, and exponential-martingale means.
//!
//! Between background jumps every buffer moves linearly, so trajectories are
//! exact piecewise-linear paths: the only approximations anywhere are the
//! zero-snap width and the stopping tolerance of the release-rate solve.

use std::io::{self, Write};

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DerivedModel;
use crate::spectral;
use crate::traffic;

/// Draws an exponential variate by inverse CDF (reproducible across
/// platforms, unlike ziggurat-style samplers).
fn sample_exp(rng: &mut ChaCha8Rng, rate: f64) -> Result<f64> {
    if rate <= 0.0 {
        return Err(Error::Precondition(format!("exponential rate {rate} must be positive")));
    }
    let u: f64 = rng.random();
    Ok(-(1.0 - u).ln() / rate)
}

/// Draws from a discrete distribution given by nonnegative weights, by an
/// inverse-CDF walk.
fn sample_weighted(rng: &mut ChaCha8Rng, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u: f64 = rng.random::<f64>() * total;
    let mut last = 0;
    for (idx, w) in weights.enumerate() {
        last = idx;
        if u < w {
            return idx;
        }
        u -= w;
    }
    last
}

/// Release rates `b` for background state `i` given the set of strictly
/// positive buffers: `b_k = μ_k(i)` for positive `k`, and for empty `k` the
/// minimal-service fixed point `b_k = min(μ_k(i), λ_k(i) + Σ_ℓ b_ℓ p_{ℓk})`,
/// reached by monotone Picard iteration downward from `b⁰ = μ(i)`.
pub fn release_rates(dm: &DerivedModel, i: usize, positive: &[bool]) -> Result<DVector<f64>> {
    let d = dm.d();
    if i >= dm.m() || positive.len() != d {
        return Err(Error::Parse("release_rates: bad state index or mask length".into()));
    }
    let mu_i = dm.model.mu.column(i);
    let lambda_i = dm.model.lambda.column(i);
    let mut b = DVector::from_iterator(d, mu_i.iter().copied());
    let tol = (1e-14 * dm.rate_scale()).min(1e-12);
    for _ in 0..100_000 {
        let mut delta = 0.0f64;
        for k in 0..d {
            if positive[k] {
                continue;
            }
            let inflow: f64 =
                lambda_i[k] + (0..d).map(|l| b[l] * dm.model.p[(l, k)]).sum::<f64>();
            let nb = mu_i[k].min(inflow);
            delta = delta.max((b[k] - nb).abs());
            b[k] = nb;
        }
        if delta <= tol {
            if let Some(&bad) = b.iter().find(|&&x| x < 0.0) {
                return Err(Error::NonConvergence(format!(
                    "release-rate solve produced a negative rate {bad}"
                )));
            }
            return Ok(b);
        }
    }
    Err(Error::NonConvergence("release-rate iteration exceeded 1e5 passes".into()))
}

/// One linear piece of a trajectory: constant slopes for buffers and
/// regulators within `[t_start, t_end)` under background state `j`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub j: usize,
    pub z_start: Vec<f64>,
    pub z_slope: Vec<f64>,
    pub y_rate: Vec<f64>,
}

/// Simulation state at an event time.
#[derive(Clone, Debug)]
pub struct PathState {
    pub t: f64,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
    pub j: usize,
    /// The background state at time 0.
    pub j_init: usize,
    /// Regulated-and-at-zero flags from the last rate solve.
    pub empty: Vec<bool>,
    regulated: Vec<bool>,
    z0: DVector<f64>,
    /// Accumulated free motion V(t) = ∫ v_{J(s)} ds, for conservation checks.
    v_acc: DVector<f64>,
    /// Running per-coordinate peak, setting the zero-snap width.
    z_peak: DVector<f64>,
    t_next_jump: f64,
    zero_run: usize,
}

impl PathState {
    /// Starts a path at `z0` in background state `j0`, drawing the first
    /// jump time. `regulated[k]` marks the coordinates with a Skorokhod
    /// boundary; the rest evolve freely.
    pub fn start(
        dm: &DerivedModel,
        z0: DVector<f64>,
        j0: usize,
        regulated: &[bool],
        rng: &mut ChaCha8Rng,
    ) -> Result<PathState> {
        let d = dm.d();
        if z0.len() != d || regulated.len() != d || j0 >= dm.m() {
            return Err(Error::Parse("inconsistent initial state".into()));
        }
        let delta = sample_exp(rng, -dm.model.q[(j0, j0)])?;
        Ok(PathState {
            t: 0.0,
            z: z0.clone(),
            y: DVector::zeros(d),
            j: j0,
            j_init: j0,
            empty: vec![false; d],
            regulated: regulated.to_vec(),
            z0: z0.clone(),
            v_acc: DVector::zeros(d),
            z_peak: z0,
            t_next_jump: delta,
            zero_run: 0,
        })
    }

    fn snap_width(&self, k: usize) -> f64 {
        1e-12 * (1.0 + self.z_peak[k])
    }

    /// Snaps near-zero regulated coordinates to exactly zero and refreshes
    /// peaks.
    fn snap(&mut self) {
        for k in 0..self.z.len() {
            self.z_peak[k] = self.z_peak[k].max(self.z[k]);
            if self.regulated[k] && self.z[k].abs() <= self.snap_width(k) {
                self.z[k] = 0.0;
            }
        }
    }

    /// Conservation residual ‖Z − (Z(0) + V + R·Y)‖_∞.
    fn conservation_residual(&self, dm: &DerivedModel) -> f64 {
        let recon = &self.z0 + &self.v_acc + &dm.r * &self.y;
        (&self.z - recon).amax()
    }
}

/// Advances the path by one linear segment, ending at the earliest of the
/// next background jump, a buffer hitting zero, or `t_max`. Empty-set
/// membership and release rates are re-solved at the segment start,
/// iterating the empty/filling partition to consistency.
pub fn step(
    dm: &DerivedModel,
    state: &mut PathState,
    rng: &mut ChaCha8Rng,
    t_max: f64,
) -> Result<Segment> {
    let d = dm.d();
    let i = state.j;
    state.snap();

    // Empty/filling partition: start from "regulated and at zero", solve
    // rates, and release coordinates whose arrival rate exceeds capacity.
    // Rates are unchanged by the release (b_k = μ_k on both sides of the
    // reclassification), so the loop settles after at most d passes.
    let mut empty: Vec<bool> =
        (0..d).map(|k| state.regulated[k] && state.z[k] == 0.0).collect();
    let (a, b) = loop {
        let positive: Vec<bool> = empty.iter().map(|&e| !e).collect();
        let b = release_rates(dm, i, &positive)?;
        let a = DVector::from_iterator(
            d,
            (0..d).map(|k| {
                dm.model.lambda[(k, i)]
                    + (0..d).map(|l| b[l] * dm.model.p[(l, k)]).sum::<f64>()
            }),
        );
        let mut changed = false;
        for k in 0..d {
            if empty[k] && a[k] > dm.model.mu[(k, i)] {
                empty[k] = false;
                changed = true;
            }
        }
        if !changed {
            break (a, b);
        }
    };
    state.empty = empty.clone();

    // Slopes: z′ = a − b, forced to exactly zero on still-empty coordinates
    // (their solved a − b is a roundoff residual of the rate solve, and
    // integrating it would lift the buffer off the boundary).
    let mut z_slope = &a - &b;
    let mut y_rate = DVector::zeros(d);
    for k in 0..d {
        if empty[k] {
            z_slope[k] = 0.0;
            y_rate[k] = dm.model.mu[(k, i)] - b[k];
        }
    }

    // Earliest event: background jump, zero hit, or the caller's horizon.
    let mut tau = (state.t_next_jump - state.t).min(t_max - state.t);
    let mut jump = state.t_next_jump <= t_max;
    for k in 0..d {
        if state.regulated[k] && !empty[k] && z_slope[k] < 0.0 {
            let hit = state.z[k] / -z_slope[k];
            if hit < tau {
                tau = hit;
                jump = false;
            }
        }
    }
    let tau = tau.max(0.0);

    // Livelock guard: repeated zero-elapsed sub-events mean a degenerate tie
    // the snap did not resolve.
    if tau < 1e-15 * state.t.max(1.0) {
        state.zero_run += 1;
        if state.zero_run > 10 * d {
            return Err(Error::NonConvergence(format!(
                "livelock: {} zero-length sub-events at t = {}",
                state.zero_run, state.t
            )));
        }
    } else {
        state.zero_run = 0;
    }

    let seg = Segment {
        t_start: state.t,
        t_end: state.t + tau,
        j: i,
        z_start: state.z.iter().copied().collect(),
        z_slope: z_slope.iter().copied().collect(),
        y_rate: y_rate.iter().copied().collect(),
    };

    state.z += &z_slope * tau;
    state.y += &y_rate * tau;
    state.v_acc += dm.v_state(i) * tau;
    state.t = seg.t_end;
    state.snap();
    for k in 0..d {
        if state.regulated[k] && state.z[k] < 0.0 {
            if state.z[k] < -1e-12 * (1.0 + state.z_peak[k]) {
                return Err(Error::NonConvergence(format!(
                    "regulated buffer {k} went negative: {}",
                    state.z[k]
                )));
            }
            state.z[k] = 0.0;
        }
    }

    let resid = state.conservation_residual(dm);
    if resid > 1e-9 * (1.0 + state.z.amax()) {
        return Err(Error::NonConvergence(format!(
            "flow conservation violated at t = {}: residual {resid:.3e}",
            state.t
        )));
    }

    if jump && state.t >= state.t_next_jump {
        let row = dm.model.q.row(i);
        let next = sample_weighted(
            rng,
            (0..dm.m()).map(move |l| if l == i { 0.0 } else { row[l].max(0.0) }),
        );
        state.j = next;
        let delta = sample_exp(rng, -dm.model.q[(next, next)])?;
        state.t_next_jump = state.t + delta;
    }
    Ok(seg)
}

/// Full piecewise-linear path with its terminal state.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub segments: Vec<Segment>,
    pub end: PathState,
}

/// Runs one replication from `Z(0) = 0`, `J(0) ~ π`, streaming every segment
/// into `sink`. Deterministic in `(model, horizon, seed, stream)`.
pub fn simulate_with<F: FnMut(&Segment)>(
    dm: &DerivedModel,
    regulated: &[bool],
    horizon: f64,
    seed: u64,
    stream: u64,
    mut sink: F,
) -> Result<PathState> {
    if !(horizon > 0.0) {
        return Err(Error::Precondition(format!("horizon {horizon} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let pi = traffic::stationary_background(&dm.model.q)?;
    let j0 = sample_weighted(&mut rng, pi.iter().copied());
    let mut state = PathState::start(dm, DVector::zeros(dm.d()), j0, regulated, &mut rng)?;
    while state.t < horizon {
        let seg = step(dm, &mut state, &mut rng, horizon)?;
        if seg.t_end > seg.t_start {
            sink(&seg);
        }
    }
    Ok(state)
}

/// Fully reflected trajectory (every coordinate regulated).
pub fn simulate(dm: &DerivedModel, horizon: f64, seed: u64) -> Result<Trajectory> {
    simulate_partial(dm, &(0..dm.d()).collect::<Vec<_>>(), horizon, seed)
}

/// Partially reflected trajectory: only the stations in `a` (0-based) keep
/// the Skorokhod boundary; the rest run free and may go negative.
pub fn simulate_partial(dm: &DerivedModel, a: &[usize], horizon: f64, seed: u64) -> Result<Trajectory> {
    let mut regulated = vec![false; dm.d()];
    for &k in a {
        if k >= dm.d() {
            return Err(Error::Parse(format!("station index {k} out of range")));
        }
        regulated[k] = true;
    }
    let mut segments = Vec::new();
    let end = simulate_with(dm, &regulated, horizon, seed, 0, |s| segments.push(s.clone()))?;
    Ok(Trajectory { segments, end })
}

/// Default burn-in: twenty relaxation times, where the relaxation time of
/// station k is the mean drain time scale 1/(μ̄_k − ᾱ_k).
pub fn default_burn_in(dm: &DerivedModel) -> Result<f64> {
    let sol = traffic::solve_traffic(dm)?;
    let mut worst: f64 = 0.0;
    for k in 0..dm.d() {
        let gap = sol.mu_bar[k] - sol.alpha_bar[k];
        if gap <= 0.0 {
            return Err(Error::Precondition(
                "burn-in undefined: some station has nonnegative drift".into(),
            ));
        }
        worst = worst.max(1.0 / gap);
    }
    Ok(20.0 * worst)
}

/// Monte-Carlo tail estimate along one direction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailEstimate {
    pub direction: Vec<f64>,
    pub levels: Vec<f64>,
    /// Time-average exceedance probabilities per level.
    pub p_hat: Vec<f64>,
    /// Across-replication standard errors of `p_hat`.
    pub stderr: Vec<f64>,
    /// Levels with enough mass to enter the slope fit.
    pub used: Vec<bool>,
    /// Fitted decay rate (−slope of log p̂ against the level).
    pub rate: Option<f64>,
    /// Jackknife standard error of the fitted rate.
    pub rate_stderr: Option<f64>,
    pub reps: usize,
    pub horizon: f64,
    pub burn_in: f64,
}

/// Per-segment occupancy of {⟨c, z(s)⟩ > x} within the window `[w0, w1]`.
fn occupancy(u_at_w0: f64, u_dot: f64, len: f64, x: f64) -> f64 {
    if len <= 0.0 {
        return 0.0;
    }
    if u_dot.abs() * len < 1e-300 {
        return if u_at_w0 > x { len } else { 0.0 };
    }
    let cross = (x - u_at_w0) / u_dot;
    if u_dot > 0.0 {
        // Above x after the crossing.
        (len - cross.clamp(0.0, len)).max(0.0)
    } else {
        cross.clamp(0.0, len)
    }
}

/// Weighted least-squares slope of y against x. Returns (slope, intercept).
fn wls_slope(x: &[f64], y: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    if x.len() < 2 {
        return None;
    }
    let sw: f64 = w.iter().sum();
    if sw <= 0.0 {
        return None;
    }
    let mx: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..x.len() {
        sxx += w[i] * (x[i] - mx) * (x[i] - mx);
        sxy += w[i] * (x[i] - mx) * (y[i] - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Tail estimates for several directions from one shared set of
/// replications: each replication is simulated once and its segments feed
/// the occupancy counters of every (direction, level) pair.
pub fn estimate_tails(
    dm: &DerivedModel,
    directions: &[(DVector<f64>, Vec<f64>)],
    reps: usize,
    horizon: f64,
    burn_in: f64,
    seed: u64,
) -> Result<Vec<TailEstimate>> {
    if reps == 0 || !(horizon > burn_in) || burn_in < 0.0 {
        return Err(Error::Precondition(
            "need reps ≥ 1 and horizon > burn_in ≥ 0 for tail estimation".into(),
        ));
    }
    let (stable, _) = traffic::is_stable(dm)?;
    if !stable {
        return Err(Error::Precondition("tail estimation requires a stable model".into()));
    }
    for (c, levels) in directions {
        if c.len() != dm.d() || c.iter().any(|&x| x < 0.0) || c.norm() <= 0.0 {
            return Err(Error::Precondition("directions must be nonnegative and nonzero".into()));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Precondition("levels must be strictly increasing".into()));
        }
    }
    let regulated = vec![true; dm.d()];
    let window = horizon - burn_in;

    // occ[rep][dir][level]: fraction of the window above each level.
    let occ: Vec<Vec<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<Vec<f64>>> {
            let mut acc: Vec<Vec<f64>> =
                directions.iter().map(|(_, lv)| vec![0.0; lv.len()]).collect();
            simulate_with(dm, &regulated, horizon, seed, rep as u64, |seg| {
                let w0 = seg.t_start.max(burn_in);
                let w1 = seg.t_end.min(horizon);
                if w1 <= w0 {
                    return;
                }
                for (di, (c, levels)) in directions.iter().enumerate() {
                    let u0: f64 = (0..c.len()).map(|k| c[k] * seg.z_start[k]).sum();
                    let u_dot: f64 = (0..c.len()).map(|k| c[k] * seg.z_slope[k]).sum();
                    let u_w0 = u0 + u_dot * (w0 - seg.t_start);
                    for (li, &x) in levels.iter().enumerate() {
                        acc[di][li] += occupancy(u_w0, u_dot, w1 - w0, x);
                    }
                }
            })?;
            for dir_acc in &mut acc {
                for v in dir_acc.iter_mut() {
                    *v /= window;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;

    let sol = traffic::solve_traffic(dm)?;
    let min_gap = (0..dm.d())
        .map(|k| sol.mu_bar[k] - sol.alpha_bar[k])
        .fold(f64::INFINITY, f64::min);
    let effective = window * min_gap;
    let threshold = 25.0 / (reps as f64 * effective.max(1.0));

    let mut out = Vec::with_capacity(directions.len());
    for (di, (c, levels)) in directions.iter().enumerate() {
        let nl = levels.len();
        let mut p_hat = vec![0.0; nl];
        let mut stderr = vec![0.0; nl];
        for li in 0..nl {
            let vals: Vec<f64> = (0..reps).map(|r| occ[r][di][li]).collect();
            let (m, s) = mean_se(&vals);
            p_hat[li] = m;
            stderr[li] = s;
        }
        let used: Vec<bool> = p_hat.iter().map(|&p| p >= threshold).collect();

        // WLS fit of log p̂ against the level over the used points, with
        // delta-method weights (p/se)². The rate's standard error comes
        // from a leave-one-replication-out jackknife with the used set
        // held fixed.
        let fit_slope = |leave_out: Option<usize>| -> Option<f64> {
            let denom = match leave_out {
                Some(_) => reps as f64 - 1.0,
                None => reps as f64,
            };
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut ws = Vec::new();
            for li in 0..nl {
                if !used[li] {
                    continue;
                }
                let mut sum = 0.0;
                for r in 0..reps {
                    if Some(r) == leave_out {
                        continue;
                    }
                    sum += occ[r][di][li];
                }
                let p = sum / denom;
                if p <= 0.0 {
                    continue;
                }
                xs.push(levels[li]);
                ys.push(p.ln());
                let se = stderr[li].max(1e-300);
                ws.push((p_hat[li] / se).powi(2).min(1e12));
            }
            wls_slope(&xs, &ys, &ws).map(|(s, _)| s)
        };
        let (rate, rate_stderr) = match fit_slope(None) {
            Some(slope) => {
                let jack: Vec<f64> =
                    (0..reps).filter_map(|r| fit_slope(Some(r))).collect();
                let se = if jack.len() == reps && reps > 1 {
                    let jm = jack.iter().sum::<f64>() / reps as f64;
                    let s2 = jack.iter().map(|v| (v - jm) * (v - jm)).sum::<f64>();
                    Some(((reps as f64 - 1.0) / reps as f64 * s2).sqrt())
                } else {
                    None
                };
                (Some(-slope), se)
            }
            None => (None, None),
        };
        out.push(TailEstimate {
            direction: c.iter().copied().collect(),
            levels: levels.clone(),
            p_hat,
            stderr,
            used,
            rate,
            rate_stderr,
            reps,
            horizon,
            burn_in,
        });
    }
    Ok(out)
}

/// Single-direction convenience wrapper around [`estimate_tails`].
pub fn estimate_tail(
    dm: &DerivedModel,
    c: &DVector<f64>,
    levels: &[f64],
    reps: usize,
    horizon: f64,
    burn_in: f64,
    seed: u64,
) -> Result<TailEstimate> {
    let mut v = estimate_tails(dm, &[(c.clone(), levels.to_vec())], reps, horizon, burn_in, seed)?;
    Ok(v.pop().expect("one direction in, one estimate out"))
}

/// Monte-Carlo check of the stationary moment identity at one θ:
/// γ(θ)·ψ̂(θ) + Σ_k γ_k(θ)·ψ̂_k(θ) should vanish.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BarResidual {
    pub theta: Vec<f64>,
    /// Time-average of e^{⟨θ,Z⟩} h_θ(J).
    pub psi: f64,
    pub psi_stderr: f64,
    /// Regulator-weighted averages (1/T)∫ e^{⟨θ,Z⟩} h_θ(J) dY_k.
    pub psi_k: Vec<f64>,
    pub psi_k_stderr: Vec<f64>,
    pub residual: f64,
    pub residual_stderr: f64,
    /// Residual divided by the magnitude of its constituent terms.
    pub normalized: f64,
    pub reps: usize,
}

/// ∫₀^len e^{u0 + u̇ s} ds, stable for small u̇·len.
fn exp_integral(u0: f64, u_dot: f64, len: f64) -> f64 {
    let x = u_dot * len;
    if x.abs() < 1e-8 {
        len * u0.exp() * (1.0 + 0.5 * x + x * x / 6.0)
    } else {
        u0.exp() * x.exp_m1() / u_dot
    }
}

pub fn estimate_bar_residual(
    dm: &DerivedModel,
    theta: &DVector<f64>,
    reps: usize,
    horizon: f64,
    burn_in: f64,
    seed: u64,
) -> Result<BarResidual> {
    if reps == 0 || !(horizon > burn_in) || burn_in < 0.0 {
        return Err(Error::Precondition(
            "need reps ≥ 1 and horizon > burn_in ≥ 0 for the residual estimate".into(),
        ));
    }
    let d = dm.d();
    let sp = spectral::perron(dm, theta)?;
    let gk = spectral::gamma_k(dm, theta);
    let regulated = vec![true; d];
    let window = horizon - burn_in;

    // Per replication: (S_ψ, S_ψ1..S_ψd) time integrals.
    let sums: Vec<(f64, Vec<f64>)> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<(f64, Vec<f64>)> {
            let mut s_psi = 0.0;
            let mut s_psik = vec![0.0; d];
            simulate_with(dm, &regulated, horizon, seed, rep as u64, |seg| {
                let w0 = seg.t_start.max(burn_in);
                let w1 = seg.t_end.min(horizon);
                if w1 <= w0 {
                    return;
                }
                let u0: f64 = (0..d).map(|k| theta[k] * seg.z_start[k]).sum();
                let u_dot: f64 = (0..d).map(|k| theta[k] * seg.z_slope[k]).sum();
                let u_w0 = u0 + u_dot * (w0 - seg.t_start);
                let integral = sp.h[seg.j] * exp_integral(u_w0, u_dot, w1 - w0);
                s_psi += integral;
                for k in 0..d {
                    if seg.y_rate[k] > 0.0 {
                        s_psik[k] += seg.y_rate[k] * integral;
                    }
                }
            })?;
            Ok((s_psi / window, s_psik.iter().map(|v| v / window).collect()))
        })
        .collect::<Result<Vec<_>>>()?;

    let psi_vals: Vec<f64> = sums.iter().map(|(p, _)| *p).collect();
    let (psi, psi_stderr) = mean_se(&psi_vals);
    let mut psi_k = vec![0.0; d];
    let mut psi_k_stderr = vec![0.0; d];
    for k in 0..d {
        let vals: Vec<f64> = sums.iter().map(|(_, pk)| pk[k]).collect();
        let (m, s) = mean_se(&vals);
        psi_k[k] = m;
        psi_k_stderr[k] = s;
    }
    let resid_vals: Vec<f64> = sums
        .iter()
        .map(|(p, pk)| sp.gamma * p + (0..d).map(|k| gk[k] * pk[k]).sum::<f64>())
        .collect();
    let (residual, residual_stderr) = mean_se(&resid_vals);
    let magnitude = sp.gamma.abs() * psi
        + (0..d).map(|k| gk[k].abs() * psi_k[k]).sum::<f64>();
    Ok(BarResidual {
        theta: theta.iter().copied().collect(),
        psi,
        psi_stderr,
        psi_k,
        psi_k_stderr,
        residual,
        residual_stderr,
        normalized: residual / magnitude.max(1e-300),
        reps,
    })
}

/// Sample mean of the exponential martingale at a fixed time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MartingaleCheck {
    pub theta: Vec<f64>,
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
    pub reps: usize,
    /// Replications rejected for exponent overflow.
    pub rejected: usize,
    /// False when more than 1% of replications overflowed.
    pub valid: bool,
}

pub fn martingale_check(
    dm: &DerivedModel,
    theta: &DVector<f64>,
    t: f64,
    reps: usize,
    seed: u64,
) -> Result<MartingaleCheck> {
    if reps == 0 || !(t > 0.0) {
        return Err(Error::Precondition("need reps ≥ 1 and t > 0".into()));
    }
    let d = dm.d();
    let sp = spectral::perron(dm, theta)?;
    let gk = spectral::gamma_k(dm, theta);
    let regulated = vec![true; d];
    let values: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<Option<f64>> {
            let end = simulate_with(dm, &regulated, t, seed, rep as u64, |_| {})?;
            let mut exponent: f64 = (0..d).map(|k| theta[k] * end.z[k]).sum();
            exponent += sp.h[end.j].ln() - sp.h[end.j_init].ln();
            exponent -= sp.gamma * t;
            exponent -= (0..d).map(|k| gk[k] * end.y[k]).sum::<f64>();
            if exponent.abs() > 700.0 {
                return Ok(None);
            }
            Ok(Some(exponent.exp()))
        })
        .collect::<Result<Vec<_>>>()?;
    let accepted: Vec<f64> = values.iter().flatten().copied().collect();
    let rejected = reps - accepted.len();
    if accepted.is_empty() {
        return Err(Error::NonConvergence(
            "every martingale replication overflowed; θ·t is too large".into(),
        ));
    }
    let (mean, stderr) = mean_se(&accepted);
    Ok(MartingaleCheck {
        theta: theta.iter().copied().collect(),
        t,
        mean,
        stderr,
        reps,
        rejected,
        valid: (rejected as f64) <= 0.01 * reps as f64,
    })
}

/// Reflection residual of a finished trajectory,
/// ‖Z(T) − (V(T) + R·Y(T))‖_∞, with V and Y re-integrated from the
/// segments (independent of the accumulator used during stepping).
pub fn reflection_residual(dm: &DerivedModel, traj: &Trajectory) -> f64 {
    let d = dm.d();
    let mut v = DVector::zeros(d);
    let mut y = DVector::zeros(d);
    for s in &traj.segments {
        let tau = s.t_end - s.t_start;
        v += dm.v_state(s.j) * tau;
        for k in 0..d {
            y[k] += s.y_rate[k] * tau;
        }
    }
    let recon = v + &dm.r * y;
    (&traj.end.z - recon).amax()
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

/// CSV export of a trajectory: one row per segment.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, w: &mut W) -> io::Result<()> {
    let d = traj.end.z.len();
    write!(w, "t_start,t_end,j")?;
    for k in 0..d {
        write!(w, ",z{}", k + 1)?;
    }
    for k in 0..d {
        write!(w, ",slope{}", k + 1)?;
    }
    for k in 0..d {
        write!(w, ",y_rate{}", k + 1)?;
    }
    writeln!(w)?;
    for s in &traj.segments {
        write!(w, "{:.16e},{:.16e},{}", s.t_start, s.t_end, s.j + 1)?;
        for v in s.z_start.iter().chain(&s.z_slope).chain(&s.y_rate) {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// CSV export of a tail estimate: one row per level.
pub fn write_tail_csv<W: Write>(est: &TailEstimate, w: &mut W) -> io::Result<()> {
    writeln!(w, "x,p_hat,stderr,used")?;
    for i in 0..est.levels.len() {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{}",
            est.levels[i], est.p_hat[i], est.stderr[i], est.used[i] as u8
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive, MmfnModel};
    use crate::test_models::{feed2, par2, tandem2};
    use nalgebra::DMatrix;

    #[test]
    fn release_rates_reduce_to_known_forms() {
        let dm = tandem2();
        // All positive: full service.
        let b = release_rates(&dm, 0, &[true, true]).unwrap();
        assert_eq!(b, DVector::from_row_slice(&[1.5, 1.9]));
        // Both empty in state 2: λ₁ = 0.2 is below both service rates, so
        // the tandem passes it straight through.
        let b = release_rates(&dm, 1, &[false, false]).unwrap();
        assert!((b[0] - 0.2).abs() < 1e-12);
        assert!((b[1] - 0.2).abs() < 1e-12);
        // Decoupled stations: empty ⇒ min(λ, μ) coordinatewise.
        let dm = par2();
        let b = release_rates(&dm, 0, &[false, false]).unwrap();
        assert!((b[0] - 1.2).abs() < 1e-12); // min(1.5, 1.2)
        assert!((b[1] - 0.4).abs() < 1e-12); // min(0.4, 1.3)
    }

    #[test]
    fn trajectories_are_deterministic_and_continuous() {
        let dm = feed2();
        let a = simulate(&dm, 200.0, 7).unwrap();
        let b = simulate(&dm, 200.0, 7).unwrap();
        assert_eq!(a.segments, b.segments);
        let c = simulate(&dm, 200.0, 8).unwrap();
        assert_ne!(a.segments, c.segments);
        // Continuity across segment boundaries.
        for w in a.segments.windows(2) {
            let tau = w[0].t_end - w[0].t_start;
            for k in 0..2 {
                let z_end = w[0].z_start[k] + tau * w[0].z_slope[k];
                assert!(
                    (z_end - w[1].z_start[k]).abs() <= 1e-9 * (1.0 + z_end.abs()),
                    "discontinuity at t = {}",
                    w[0].t_end
                );
            }
        }
        assert!((a.end.t - 200.0).abs() < 1e-12);
    }

    #[test]
    fn reflection_identity_from_recomputed_free_motion() {
        let dm = tandem2();
        let traj = simulate(&dm, 300.0, 41).unwrap();
        // Recompute V(T) by integrating v along the background path and Y(T)
        // from the regulator rates, then reassemble Z(T).
        let mut v = DVector::zeros(2);
        let mut y = DVector::zeros(2);
        for s in &traj.segments {
            let tau = s.t_end - s.t_start;
            v += dm.v_state(s.j) * tau;
            for k in 0..2 {
                y[k] += s.y_rate[k] * tau;
            }
        }
        let recon = &v + &dm.r * &y;
        for k in 0..2 {
            assert!(
                (traj.end.z[k] - recon[k]).abs() <= 1e-10 * (1.0 + traj.end.z[k].abs()),
                "station {k}: {} vs {}",
                traj.end.z[k],
                recon[k]
            );
        }
        // Complementarity: no regulator growth away from the boundary.
        for s in &traj.segments {
            for k in 0..2 {
                if s.y_rate[k] > 0.0 {
                    assert_eq!(s.z_start[k], 0.0);
                    assert_eq!(s.z_slope[k], 0.0);
                }
            }
        }
    }

    #[test]
    fn stable_station_spends_positive_time_empty() {
        let dm = tandem2();
        let traj = simulate(&dm, 2000.0, 3).unwrap();
        let mut empty_time = [0.0f64; 2];
        for s in &traj.segments {
            for k in 0..2 {
                if s.z_start[k] == 0.0 && s.z_slope[k] == 0.0 {
                    empty_time[k] += s.t_end - s.t_start;
                }
            }
        }
        for k in 0..2 {
            assert!(
                empty_time[k] / 2000.0 > 0.05,
                "station {k} empty only {:.3} of the time",
                empty_time[k] / 2000.0
            );
        }
    }

    #[test]
    fn unstable_station_grows_at_its_mean_drift() {
        // Inflate station 1's input so its net drift is positive.
        let m = MmfnModel::new(
            DMatrix::from_row_slice(2, 2, &[2.5, 0.7, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.5, 1.6, 1.9, 1.15]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[-0.7, 0.7, 1.1, -1.1]),
        )
        .unwrap();
        let dm = derive(m).unwrap();
        let (stable, drift) = traffic::is_stable(&dm).unwrap();
        assert!(!stable);
        assert!(drift[0] > 0.05);
        let horizon = 3000.0;
        let traj = simulate(&dm, horizon, 11).unwrap();
        let slope = traj.end.z[0] / horizon;
        assert!(
            (slope - drift[0]).abs() < 0.3 * drift[0],
            "observed slope {slope} vs predicted {}",
            drift[0]
        );
    }

    #[test]
    fn unregulated_coordinates_follow_the_free_motion() {
        let dm = feed2();
        let traj = simulate_partial(&dm, &[], 100.0, 13).unwrap();
        // No regulation: Y ≡ 0 and Z(t) = V(t).
        assert_eq!(traj.end.y, DVector::zeros(2));
        let mut v = DVector::zeros(2);
        for s in &traj.segments {
            v += dm.v_state(s.j) * (s.t_end - s.t_start);
        }
        assert!((traj.end.z.clone() - v).amax() < 1e-10);
        // Stable model: free motion drifts negative.
        assert!(traj.end.z[0] < 0.0);
    }

    #[test]
    fn partial_reflection_drains_the_free_station() {
        // Regulate only station 1 of the tandem; station 2 then drains at
        // the stationary rate ᾱ₂ − μ̄₂ < 0.
        let dm = tandem2();
        let sol = traffic::solve_traffic(&dm).unwrap();
        let predicted = sol.alpha_bar[1] - sol.mu_bar[1];
        let horizon = 3000.0;
        let traj = simulate_partial(&dm, &[0], horizon, 17).unwrap();
        let slope = traj.end.z[1] / horizon;
        assert!(slope < 0.0);
        assert!(
            (slope - predicted).abs() < 0.3 * predicted.abs(),
            "observed slope {slope} vs predicted {predicted}"
        );
        // Same seed with full regulation matches simulate exactly.
        let full = simulate_partial(&dm, &[0, 1], 50.0, 23).unwrap();
        let plain = simulate(&dm, 50.0, 23).unwrap();
        assert_eq!(full.segments, plain.segments);
    }

    #[test]
    fn empty_buffer_regulator_grows_at_the_rate_gap() {
        // Arrivals below service in every state: buffers never leave zero
        // and Y grows exactly at μ − λ.
        let m = MmfnModel::new(
            DMatrix::from_row_slice(2, 2, &[0.3, 0.2, 0.1, 0.4]),
            DMatrix::from_element(2, 2, 1.0),
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 2, &[-0.9, 0.9, 0.5, -0.5]),
        )
        .unwrap();
        let dm = derive(m).unwrap();
        let traj = simulate(&dm, 150.0, 5).unwrap();
        assert_eq!(traj.end.z, DVector::zeros(2));
        let mut expected = DVector::zeros(2);
        for s in &traj.segments {
            let tau = s.t_end - s.t_start;
            for k in 0..2 {
                expected[k] += (1.0 - dm.model.lambda[(k, s.j)]) * tau;
            }
        }
        assert!((traj.end.y.clone() - expected).amax() < 1e-10);
    }

    #[test]
    fn tail_estimates_are_monotone_and_positive_at_zero() {
        let dm = par2();
        let est = estimate_tail(
            &dm,
            &DVector::from_row_slice(&[1.0, 0.0]),
            &[0.0, 0.3, 0.6, 0.9, 1.2],
            8,
            400.0,
            50.0,
            2024,
        )
        .unwrap();
        assert!(est.p_hat[0] > 0.0 && est.p_hat[0] < 1.0);
        for w in est.p_hat.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "occupancy must be nested");
        }
        let rate = est.rate.expect("enough mass for a fit");
        assert!(rate > 0.0);
        assert!(est.rate_stderr.unwrap() > 0.0);
    }

    #[test]
    fn shared_replications_match_single_direction_runs() {
        let dm = par2();
        let dirs = vec![
            (DVector::from_row_slice(&[1.0, 0.0]), vec![0.0, 0.5, 1.0]),
            (DVector::from_row_slice(&[0.0, 1.0]), vec![0.0, 0.5, 1.0]),
        ];
        let joint = estimate_tails(&dm, &dirs, 4, 200.0, 20.0, 99).unwrap();
        let solo = estimate_tail(
            &dm,
            &DVector::from_row_slice(&[1.0, 0.0]),
            &[0.0, 0.5, 1.0],
            4,
            200.0,
            20.0,
            99,
        )
        .unwrap();
        assert_eq!(joint[0].p_hat, solo.p_hat);
    }

    #[test]
    fn bar_residual_at_zero_recovers_the_palm_means() {
        let dm = tandem2();
        let sol = traffic::solve_traffic(&dm).unwrap();
        let r = estimate_bar_residual(&dm, &DVector::zeros(2), 16, 800.0, 100.0, 31).unwrap();
        // θ = 0: every coefficient γ, γ_k vanishes, so the residual is 0
        // identically; ψ̂ is exactly 1.
        assert_eq!(r.residual, 0.0);
        assert!((r.psi - 1.0).abs() < 1e-12);
        // ψ̂_k estimates the mean regulator drift μ̄_k − ᾱ_k.
        for k in 0..2 {
            let m_k = sol.mu_bar[k] - sol.alpha_bar[k];
            assert!(
                (r.psi_k[k] - m_k).abs() <= 3.0 * r.psi_k_stderr[k].max(1e-4),
                "station {k}: ψ̂_k = {} vs m_k = {m_k} (se {})",
                r.psi_k[k],
                r.psi_k_stderr[k]
            );
        }
    }

    #[test]
    fn martingale_mean_is_one() {
        let dm = tandem2();
        // θ = 0 is the degenerate martingale: 1 with zero variance, up to
        // the roundoff the eigen solve leaves in γ and h.
        let z = martingale_check(&dm, &DVector::zeros(2), 10.0, 8, 77).unwrap();
        assert!((z.mean - 1.0).abs() < 1e-12, "mean {}", z.mean);
        assert!(z.stderr < 1e-12, "stderr {}", z.stderr);
        assert_eq!(z.rejected, 0);
        // Moderate θ: within three standard errors of 1.
        let c = martingale_check(&dm, &DVector::from_row_slice(&[0.25, 0.1]), 15.0, 64, 78).unwrap();
        assert!(c.valid);
        assert!(
            (c.mean - 1.0).abs() <= 3.0 * c.stderr,
            "mean {} ± {}",
            c.mean,
            c.stderr
        );
    }

    #[test]
    fn csv_exports_have_expected_shape() {
        let dm = par2();
        let traj = simulate(&dm, 30.0, 1).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + traj.segments.len());
        assert!(text.starts_with("t_start,t_end,j,z1,z2,slope1,slope2,y_rate1,y_rate2"));

        let est = estimate_tail(
            &dm,
            &DVector::from_row_slice(&[1.0, 1.0]),
            &[0.0, 1.0],
            2,
            50.0,
            5.0,
            4,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tail_csv(&est, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
