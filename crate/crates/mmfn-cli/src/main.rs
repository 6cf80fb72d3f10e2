//! Command-line front end: parse model files, run the analyses, and emit
//! tables, CSV, or JSON.
//!
//! Exit codes: 0 success, 1 verification found a violated bracket or check,
//! 2 model validation failure, 3 parse/usage failure, 4 precondition
//! failure (e.g. unstable model), 5 numerical non-convergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use mmfn::error::{Error, Result};
use mmfn::geometry::{auto_box, dmax_boundary, write_domain_csv, BoundingBox, Lattice};
use mmfn::model::{derive, validate_model, DerivedModel, MmfnModel};
use mmfn::pipeline::{
    build_grid, compute_bounds, verify, DecayReport, GridSpec, StationReport, VerifyConfig,
    VerifyReport, DEFAULT_SEED,
};
use mmfn::simulator::{
    reflection_residual, simulate, write_tail_csv, write_trajectory_csv, Trajectory,
};
use mmfn::{spectral, traffic};

#[derive(Parser)]
#[command(
    name = "mmfn",
    version,
    about = "Decay-rate analysis and exact simulation of Markov-modulated fluid networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Args)]
struct CommonArgs {
    /// Model file (JSON with fields d, m, lambda, mu, P, Q).
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Output style for the main report on stdout.
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Directory for artifact files (CSV exports, JSON reports).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Lattice cells per axis.
    #[arg(long, value_name = "N", default_value_t = 120)]
    resolution: usize,
    /// Explicit box per axis, e.g. "-1..2,-0.5..0.8" (default: auto-sized).
    #[arg(long = "box", value_name = "LO..HI,...")]
    box_spec: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the model file's structural and semantic invariants.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Stationary background distribution, traffic rates, drift, stability.
    Stability {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate the principal eigenvalue γ and its gradient.
    Gamma {
        #[command(flatten)]
        common: CommonArgs,
        /// Evaluation point θ as comma-separated coordinates (repeatable).
        #[arg(long, value_name = "CSV")]
        theta: Vec<String>,
        /// Evaluate over the whole lattice instead and emit CSV.
        #[arg(long)]
        grid: bool,
        #[command(flatten)]
        grid_args: GridArgs,
    },
    /// Run the domain fixed-point iteration and export the lattice sets.
    Domain {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        grid_args: GridArgs,
    },
    /// Analytic decay-rate brackets per station and direction.
    Bounds {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        grid_args: GridArgs,
        /// Extra direction c as comma-separated coordinates (repeatable).
        #[arg(long, value_name = "CSV")]
        direction: Vec<String>,
        /// Restrict the station table to one station (1-based).
        #[arg(long, value_name = "K")]
        station: Option<usize>,
    },
    /// Simulate one reflected trajectory.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "T", default_value_t = 1000.0)]
        horizon: f64,
        #[arg(long, value_name = "N", default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Cross-validate the analytic brackets against simulation.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "N", default_value_t = 120)]
        resolution: usize,
        /// Tail-estimation replications.
        #[arg(long, value_name = "N", default_value_t = 64)]
        reps: usize,
        #[arg(long, value_name = "T", default_value_t = 8000.0)]
        horizon: f64,
        /// Burn-in before tail statistics (default: 20 relaxation times).
        #[arg(long = "burn-in", value_name = "T")]
        burn_in: Option<f64>,
        /// Explicit tail levels as comma-separated values.
        #[arg(long, value_name = "CSV")]
        levels: Option<String>,
        #[arg(long, value_name = "N", default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(3);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate { common } => cmd_validate(&common),
        Command::Stability { common } => cmd_stability(&common),
        Command::Gamma { common, theta, grid, grid_args } => {
            cmd_gamma(&common, &theta, grid, &grid_args)
        }
        Command::Domain { common, grid_args } => cmd_domain(&common, &grid_args),
        Command::Bounds { common, grid_args, direction, station } => {
            cmd_bounds(&common, &grid_args, &direction, station)
        }
        Command::Simulate { common, horizon, seed } => cmd_simulate(&common, horizon, seed),
        Command::Verify { common, resolution, reps, horizon, burn_in, levels, seed } => {
            cmd_verify(&common, resolution, reps, horizon, burn_in, levels.as_deref(), seed)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load_model(path: &Path) -> Result<MmfnModel> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn load_derived(path: &Path) -> Result<DerivedModel> {
    derive(load_model(path)?)
}

fn parse_vector(text: &str, what: &str) -> Result<DVector<f64>> {
    let vals: std::result::Result<Vec<f64>, _> =
        text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match vals {
        Ok(v) if !v.is_empty() => Ok(DVector::from_vec(v)),
        _ => Err(Error::Parse(format!("cannot parse {what} from \"{text}\""))),
    }
}

fn parse_box(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for part in text.split(',') {
        let Some((a, b)) = part.split_once("..") else {
            return Err(Error::Parse(format!("box axis \"{part}\" is not of the form lo..hi")));
        };
        let pa: f64 = a
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad box bound \"{a}\"")))?;
        let pb: f64 = b
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad box bound \"{b}\"")))?;
        lo.push(pa);
        hi.push(pb);
    }
    Ok((lo, hi))
}

fn grid_spec(grid_args: &GridArgs) -> Result<GridSpec> {
    let (lo, hi) = match &grid_args.box_spec {
        Some(text) => {
            let (lo, hi) = parse_box(text)?;
            (Some(lo), Some(hi))
        }
        None => (None, None),
    };
    Ok(GridSpec { resolution: grid_args.resolution, lo, hi })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Parse(format!("cannot write {}: {e}", path.display()))
}

fn write_artifact(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(path)
}

fn to_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize infallibly");
    s.push('\n');
    s
}

/// Six significant digits for human tables.
fn sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let a = x.abs();
    if (1e-4..1e7).contains(&a) {
        let digits = a.log10().floor() as i32;
        let dec = (5 - digits).max(0) as usize;
        format!("{x:.dec$}")
    } else {
        format!("{x:.5e}")
    }
}

fn sig_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), sig)
}

fn vec_sig(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|&x| sig(x)).collect();
    format!("({})", parts.join(", "))
}

fn csv_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.16e}"))
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

fn cmd_validate(common: &CommonArgs) -> Result<ExitCode> {
    let model = load_model(&common.model)?;
    let report = validate_model(&model);
    match common.format {
        Format::Json => print!("{}", to_pretty(&report)),
        Format::Csv => {
            println!("check,pass,witness");
            for c in &report.checks {
                println!(
                    "{},{},{}",
                    c.name,
                    c.pass as u8,
                    c.witness.as_deref().unwrap_or("").replace(',', ";")
                );
            }
        }
        Format::Table => {
            for c in &report.checks {
                let mark = if c.pass { "ok  " } else { "FAIL" };
                match &c.witness {
                    Some(w) => println!("{mark}  {:<24}  {w}", c.name),
                    None => println!("{mark}  {}", c.name),
                }
            }
        }
    }
    if let Some(dir) = &common.out {
        write_artifact(dir, "validate.json", to_pretty(&report).as_bytes())?;
    }
    if report.pass {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Validation(report.failed_names()))
    }
}

// ---------------------------------------------------------------------------
// stability
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct StabilityOut {
    stable: bool,
    pi: Vec<f64>,
    v_bar: Vec<f64>,
    drift: Vec<f64>,
    alpha_bar: Vec<f64>,
    mu_bar: Vec<f64>,
    /// 1-based stations stable under the capped (nonlinear) rates.
    stable_stations: Vec<usize>,
    nonlinear_gap: Vec<f64>,
    /// 1-based stations with drift inside the marginal band.
    marginal: Vec<usize>,
}

fn cmd_stability(common: &CommonArgs) -> Result<ExitCode> {
    let dm = load_derived(&common.model)?;
    let sol = traffic::solve_traffic(&dm)?;
    let rep = traffic::stability_report(&dm)?;
    let out = StabilityOut {
        stable: rep.stable,
        pi: sol.pi.iter().copied().collect(),
        v_bar: sol.v_bar.iter().copied().collect(),
        drift: rep.drift.clone(),
        alpha_bar: sol.alpha_bar.iter().copied().collect(),
        mu_bar: sol.mu_bar.iter().copied().collect(),
        stable_stations: rep.stable_stations.iter().map(|&k| k + 1).collect(),
        nonlinear_gap: rep.nonlinear_gap.clone(),
        marginal: rep.marginal.iter().map(|&k| k + 1).collect(),
    };
    match common.format {
        Format::Json => print!("{}", to_pretty(&out)),
        Format::Csv => {
            println!("station,alpha_bar,mu_bar,drift,nonlinear_gap,stable");
            for k in 0..out.drift.len() {
                println!(
                    "{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                    k + 1,
                    out.alpha_bar[k],
                    out.mu_bar[k],
                    out.drift[k],
                    out.nonlinear_gap[k],
                    out.stable_stations.contains(&(k + 1)) as u8
                );
            }
        }
        Format::Table => {
            println!("background pi    : {}", vec_sig(&out.pi));
            println!("mean net flow    : {}", vec_sig(&out.v_bar));
            println!("station drift    : {}", vec_sig(&out.drift));
            println!("arrival rates    : {}", vec_sig(&out.alpha_bar));
            println!("service rates    : {}", vec_sig(&out.mu_bar));
            println!("nonlinear gap    : {}", vec_sig(&out.nonlinear_gap));
            println!("stable stations  : {:?}", out.stable_stations);
            if !out.marginal.is_empty() {
                println!("marginal stations: {:?}", out.marginal);
            }
            println!("network stable   : {}", out.stable);
        }
    }
    if let Some(dir) = &common.out {
        write_artifact(dir, "stability.json", to_pretty(&out).as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// gamma
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GammaPoint {
    theta: Vec<f64>,
    gamma: f64,
    gamma_k: Vec<f64>,
    grad: Vec<f64>,
    spectral_gap: f64,
}

fn gamma_grid_csv(dm: &DerivedModel, bbox: &BoundingBox) -> Result<String> {
    let d = bbox.d();
    let shape = Lattice::new(&bbox.dims());
    let mut out = String::new();
    for a in 0..d {
        out.push_str(&format!("theta{},", a + 1));
    }
    out.push_str("gamma\n");
    for lin in 0..shape.len() {
        let multi = shape.decode(lin);
        let theta = bbox.point(&multi);
        let g = spectral::gamma_only(dm, &theta)?;
        for a in 0..d {
            out.push_str(&format!("{:.16e},", theta[a]));
        }
        out.push_str(&format!("{g:.16e}\n"));
    }
    Ok(out)
}

fn cmd_gamma(
    common: &CommonArgs,
    theta: &[String],
    grid: bool,
    grid_args: &GridArgs,
) -> Result<ExitCode> {
    let dm = load_derived(&common.model)?;
    if grid {
        let spec = grid_spec(grid_args)?;
        let bbox = match (&spec.lo, &spec.hi) {
            (Some(lo), Some(hi)) => {
                BoundingBox::with_bounds(lo, hi, &vec![spec.resolution.max(4); dm.d()])?
            }
            _ => auto_box(&dm, spec.resolution)?,
        };
        let csv = gamma_grid_csv(&dm, &bbox)?;
        match &common.out {
            Some(dir) => {
                let path = write_artifact(dir, "gamma.csv", csv.as_bytes())?;
                println!("wrote {}", path.display());
            }
            None => print!("{csv}"),
        }
        return Ok(ExitCode::SUCCESS);
    }
    if theta.is_empty() {
        return Err(Error::Parse("gamma needs --theta points or --grid".into()));
    }
    let mut points = Vec::new();
    for t in theta {
        let th = parse_vector(t, "theta")?;
        if th.len() != dm.d() {
            return Err(Error::Parse(format!(
                "theta has {} coordinates, model has {} stations",
                th.len(),
                dm.d()
            )));
        }
        let sp = spectral::perron(&dm, &th)?;
        let gk = spectral::gamma_k(&dm, &th);
        points.push(GammaPoint {
            theta: th.iter().copied().collect(),
            gamma: sp.gamma,
            gamma_k: gk.iter().copied().collect(),
            grad: sp.grad.iter().copied().collect(),
            spectral_gap: sp.gap,
        });
    }
    match common.format {
        Format::Json => print!("{}", to_pretty(&points)),
        Format::Csv => {
            println!("theta,gamma,gamma_k,grad");
            for p in &points {
                let join = |v: &[f64]| {
                    v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(";")
                };
                println!("{},{:.16e},{},{}", join(&p.theta), p.gamma, join(&p.gamma_k), join(&p.grad));
            }
        }
        Format::Table => {
            for p in &points {
                println!(
                    "theta = {}  gamma = {}  grad = {}  gamma_k = {}",
                    vec_sig(&p.theta),
                    sig(p.gamma),
                    vec_sig(&p.grad),
                    vec_sig(&p.gamma_k)
                );
            }
        }
    }
    if let Some(dir) = &common.out {
        write_artifact(dir, "gamma.json", to_pretty(&points).as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// domain
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DomainOut {
    box_lo: Vec<f64>,
    box_hi: Vec<f64>,
    cells: Vec<usize>,
    step: Vec<f64>,
    iterations: usize,
    gamma_minus_points: usize,
    down_closure_points: usize,
    dmax_points: usize,
    /// 1-based axes truncated by the box.
    truncated_axes: Vec<usize>,
    /// Per-sweep cardinality of each station set.
    growth: Vec<Vec<usize>>,
}

fn cmd_domain(common: &CommonArgs, grid_args: &GridArgs) -> Result<ExitCode> {
    let dm = load_derived(&common.model)?;
    let grid = build_grid(&dm, &grid_spec(grid_args)?)?;
    let out = DomainOut {
        box_lo: grid.bbox.lo.clone(),
        box_hi: grid.bbox.hi.clone(),
        cells: grid.bbox.cells.clone(),
        step: grid.bbox.step.clone(),
        iterations: grid.iterations,
        gamma_minus_points: grid.gamma_minus.count(),
        down_closure_points: grid.dc_gamma_minus.count(),
        dmax_points: grid.dmax.count(),
        truncated_axes: grid.truncated_axes.iter().map(|&a| a + 1).collect(),
        growth: grid.growth.clone(),
    };
    let domain_csv = {
        let mut buf = Vec::new();
        write_domain_csv(&grid, &mut buf).expect("in-memory write");
        buf
    };
    match common.format {
        Format::Json => print!("{}", to_pretty(&out)),
        Format::Csv => print!("{}", String::from_utf8(domain_csv.clone()).expect("utf8 csv")),
        Format::Table => {
            println!("box lo           : {}", vec_sig(&out.box_lo));
            println!("box hi           : {}", vec_sig(&out.box_hi));
            println!("cells            : {:?}", out.cells);
            println!("sweeps           : {}", out.iterations);
            println!("gamma < 0 points : {}", out.gamma_minus_points);
            println!("down-closure pts : {}", out.down_closure_points);
            println!("domain points    : {}", out.dmax_points);
            if !out.truncated_axes.is_empty() {
                println!("truncated axes   : {:?}", out.truncated_axes);
            }
        }
    }
    if let Some(dir) = &common.out {
        write_artifact(dir, "domain.json", to_pretty(&out).as_bytes())?;
        write_artifact(dir, "domain.csv", &domain_csv)?;
        let mut boundary = String::from("point\n");
        for p in dmax_boundary(&grid) {
            let row: Vec<String> = p.iter().map(|x| format!("{x:.16e}")).collect();
            boundary.push_str(&row.join(";"));
            boundary.push('\n');
        }
        write_artifact(dir, "boundary.csv", boundary.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// bounds
// ---------------------------------------------------------------------------

fn station_line(s: &StationReport) -> String {
    let mut flags = Vec::new();
    if s.rate_min_ray_box_limited {
        flags.push("ray box-limited");
    }
    if s.rate_min_hyperplane_box_limited {
        flags.push("hyperplane box-limited");
    }
    let flags = if flags.is_empty() { String::new() } else { format!("  [{}]", flags.join(", ")) };
    format!(
        "station {}: floor ray {} (±{})  hyperplane {} (±{})  cap crossing {}  cap feasible {}  axis root {}{}",
        s.station,
        sig(s.rate_min_ray),
        sig(s.rate_min_ray_error),
        sig(s.rate_min_hyperplane),
        sig(s.rate_min_hyperplane_error),
        sig_opt(s.rate_max_crossing),
        sig_opt(s.rate_max_coordinate),
        sig_opt(s.gamma_axis_root),
        flags
    )
}

fn cmd_bounds(
    common: &CommonArgs,
    grid_args: &GridArgs,
    direction: &[String],
    station: Option<usize>,
) -> Result<ExitCode> {
    let dm = load_derived(&common.model)?;
    let grid = build_grid(&dm, &grid_spec(grid_args)?)?;
    let mut dirs = Vec::new();
    for text in direction {
        dirs.push(parse_vector(text, "direction")?);
    }
    let mut report: DecayReport = compute_bounds(&dm, &grid, &dirs)?;
    if let Some(k) = station {
        if k == 0 || k > dm.d() {
            return Err(Error::Parse(format!("station {k} out of range 1..={}", dm.d())));
        }
        report.stations.retain(|s| s.station == k);
    }
    match common.format {
        Format::Json => print!("{}", to_pretty(&report)),
        Format::Csv => {
            println!(
                "station,rate_min_ray,rate_min_ray_error,rate_min_hyperplane,\
                 rate_min_hyperplane_error,rate_max_crossing,rate_max_coordinate,gamma_axis_root"
            );
            for s in &report.stations {
                println!(
                    "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{}",
                    s.station,
                    s.rate_min_ray,
                    s.rate_min_ray_error,
                    s.rate_min_hyperplane,
                    s.rate_min_hyperplane_error,
                    csv_opt(s.rate_max_crossing),
                    csv_opt(s.rate_max_coordinate),
                    csv_opt(s.gamma_axis_root)
                );
            }
        }
        Format::Table => {
            println!("drift            : {}", vec_sig(&report.drift));
            println!(
                "box              : {} .. {}  cells {:?}  sweeps {}",
                vec_sig(&report.box_lo),
                vec_sig(&report.box_hi),
                report.cells,
                report.iterations
            );
            if !report.truncated_axes.is_empty() {
                println!("truncated axes   : {:?}", report.truncated_axes);
            }
            for s in &report.stations {
                println!("{}", station_line(s));
            }
            for dr in &report.directions {
                println!(
                    "direction {}: floor ray {} (±{})  hyperplane {} (±{})  cap crossing {}  root {}  corn {}",
                    vec_sig(&dr.direction),
                    sig(dr.rate_min_ray),
                    sig(dr.rate_min_ray_error),
                    sig(dr.rate_min_hyperplane),
                    sig(dr.rate_min_hyperplane_error),
                    sig_opt(dr.rate_max_crossing),
                    sig_opt(dr.gamma_root),
                    dr.corn
                );
            }
            if let Some(w) = &report.exact_walls {
                println!("exact walls      : {}", vec_sig(w));
            }
        }
    }
    if let Some(dir) = &common.out {
        write_artifact(dir, "bounds.json", to_pretty(&report).as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SimulateOut {
    horizon: f64,
    seed: u64,
    segments: usize,
    end_t: f64,
    /// 1-based final background state.
    end_state: usize,
    end_z: Vec<f64>,
    end_y: Vec<f64>,
    reflection_residual: f64,
    /// Fraction of time each buffer spent empty.
    empty_fraction: Vec<f64>,
}

fn summarize_trajectory(dm: &DerivedModel, traj: &Trajectory, horizon: f64, seed: u64) -> SimulateOut {
    let d = dm.d();
    let mut empty = vec![0.0f64; d];
    for s in &traj.segments {
        for k in 0..d {
            if s.z_start[k] == 0.0 && s.z_slope[k] == 0.0 {
                empty[k] += s.t_end - s.t_start;
            }
        }
    }
    SimulateOut {
        horizon,
        seed,
        segments: traj.segments.len(),
        end_t: traj.end.t,
        end_state: traj.end.j + 1,
        end_z: traj.end.z.iter().copied().collect(),
        end_y: traj.end.y.iter().copied().collect(),
        reflection_residual: reflection_residual(dm, traj),
        empty_fraction: empty.iter().map(|e| e / horizon).collect(),
    }
}

fn cmd_simulate(common: &CommonArgs, horizon: f64, seed: u64) -> Result<ExitCode> {
    let dm = load_derived(&common.model)?;
    let traj = simulate(&dm, horizon, seed)?;
    let out = summarize_trajectory(&dm, &traj, horizon, seed);
    match common.format {
        Format::Json => print!("{}", to_pretty(&out)),
        Format::Csv => {
            let mut buf = Vec::new();
            write_trajectory_csv(&traj, &mut buf).expect("in-memory write");
            print!("{}", String::from_utf8(buf).expect("utf8 csv"));
        }
        Format::Table => {
            println!("horizon          : {}", sig(out.horizon));
            println!("seed             : {}", out.seed);
            println!("segments         : {}", out.segments);
            println!("final state      : {}", out.end_state);
            println!("final buffers    : {}", vec_sig(&out.end_z));
            println!("final regulators : {}", vec_sig(&out.end_y));
            println!("empty fraction   : {}", vec_sig(&out.empty_fraction));
            println!("flow residual    : {}", sig(out.reflection_residual));
        }
    }
    if let Some(dir) = &common.out {
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).expect("in-memory write");
        write_artifact(dir, "trajectory.csv", &buf)?;
        write_artifact(dir, "simulate.json", to_pretty(&out).as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn direction_label(c: &[f64]) -> String {
    let positive: Vec<usize> =
        c.iter().enumerate().filter(|&(_, &x)| x > 0.0).map(|(k, _)| k).collect();
    if positive.len() == 1 {
        format!("e{}", positive[0] + 1)
    } else {
        "diag".into()
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    common: &CommonArgs,
    resolution: usize,
    reps: usize,
    horizon: f64,
    burn_in: Option<f64>,
    levels: Option<&str>,
    seed: u64,
) -> Result<ExitCode> {
    let dm = load_derived(&common.model)?;
    let levels_override = match levels {
        Some(text) => Some(parse_vector(text, "levels")?.iter().copied().collect()),
        None => None,
    };
    let cfg = VerifyConfig {
        resolution,
        reps,
        horizon,
        burn_in,
        levels_override,
        seed,
        ..VerifyConfig::default()
    };
    let report: VerifyReport = verify(&dm, &cfg)?;
    match common.format {
        Format::Json => print!("{}", to_pretty(&report)),
        Format::Csv => {
            println!("direction,rate_min,rate_max,fitted,fitted_stderr,used_levels,verdict");
            for b in &report.brackets {
                println!(
                    "{},{:.16e},{},{},{},{},{}",
                    direction_label(&b.direction),
                    b.rate_min,
                    csv_opt(b.rate_max),
                    csv_opt(b.fitted),
                    csv_opt(b.fitted_stderr),
                    b.used_levels,
                    b.verdict
                );
            }
        }
        Format::Table => {
            println!(
                "grid {} cells/axis, {} reps, horizon {}, burn-in {}, seed {}",
                report.resolution,
                report.reps,
                sig(report.horizon),
                sig(report.burn_in),
                report.seed
            );
            for b in &report.brackets {
                let cap = b.rate_max.map_or("inf".to_string(), sig);
                println!(
                    "{:<5} bracket [{}, {}]  fitted {} ± {}  ({} levels)  {}",
                    direction_label(&b.direction),
                    sig(b.rate_min),
                    cap,
                    sig_opt(b.fitted),
                    sig_opt(b.fitted_stderr),
                    b.used_levels,
                    b.verdict
                );
            }
            println!(
                "identity residual at theta = {}: {} ± {} (normalized {})  {}",
                vec_sig(&report.check_theta),
                sig(report.bar.residual),
                sig(report.bar.residual_stderr),
                sig(report.bar.normalized),
                if report.bar_pass { "pass" } else { "FAIL" }
            );
            println!(
                "martingale mean at t = {}: {} ± {} ({} rejected)  {}",
                sig(report.martingale.t),
                sig(report.martingale.mean),
                sig(report.martingale.stderr),
                report.martingale.rejected,
                if report.martingale_pass { "pass" } else { "FAIL" }
            );
            println!("overall          : {}", if report.pass { "PASS" } else { "FAIL" });
        }
    }
    if let Some(dir) = &common.out {
        write_artifact(dir, "verify.json", to_pretty(&report).as_bytes())?;
        for est in &report.tails {
            let mut buf = Vec::new();
            write_tail_csv(est, &mut buf).expect("in-memory write");
            write_artifact(dir, &format!("tail_{}.csv", direction_label(&est.direction)), &buf)?;
        }
    }
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
