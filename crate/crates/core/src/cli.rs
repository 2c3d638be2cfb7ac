//! `mpcnet` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::condense::{condense, MpcProblem};
use crate::error::MpcError;
use crate::format;
use crate::implicit::build_implicit;
use crate::linalg;
use crate::pwa::{self, extract_pwa, search_cost};
use crate::simulate::{
    control_surface_with, simulate_with, surface_difference, ControlStack, ControllerKind, Gain,
    GridSpec, SimulationConfig,
};
use crate::unravel::{self, unravel, UnravelConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CONTROLLER: i32 = 4;
pub const EXIT_MODE: i32 = 5;
pub const EXIT_DEGENERATE: i32 = 6;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  bad arguments or unreadable/malformed input file
  3  numerical failure (message names the failing check)
  4  controller failure during simulation (partial trace still written)
  5  surface mode needs a two-state problem
  6  recovery input has only saturated regions

Set MPCNET_THREADS to cap the worker threads used by sweeps.";

#[derive(Debug, Parser)]
#[command(name = "mpcnet", version, about = "Linear-quadratic MPC as implicit ReLU networks", after_help = EXIT_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Condense the problem and write H, F, S.
    Condense(CondenseArgs),
    /// Write the implicit network, or its unravelled explicit form.
    Export(ExportArgs),
    /// Closed-loop simulation; writes a trace CSV.
    Simulate(SimulateArgs),
    /// Control action over a square grid of states; writes a surface CSV.
    Surface(SurfaceArgs),
    /// Residual of the unravelled iteration per layer, one column per gain.
    Unravel(UnravelArgs),
    /// Extract piecewise-affine regions and search for a cost that explains them.
    Recover(RecoverArgs),
}

#[derive(Debug, Args)]
pub struct CondenseArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Unravelling gain and depth.
#[derive(Debug, Args)]
pub struct GainArgs {
    /// Scalar gain k, used as k·I.
    #[arg(long = "K", default_value_t = unravel::DEFAULT_GAIN, allow_negative_numbers = true)]
    pub k: f64,
    /// Full gain matrix file (rows per line); overrides --K.
    #[arg(long = "K-file")]
    pub k_file: Option<PathBuf>,
    /// Number of unravelled layers.
    #[arg(long = "J", default_value_t = unravel::DEFAULT_DEPTH)]
    pub j: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Export the fixed-depth explicit network instead.
    #[arg(long)]
    pub explicit: bool,
    #[command(flatten)]
    pub gain: GainArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// oracle | implicit | implicit-fp | explicit
    #[arg(long, default_value = "oracle")]
    pub controller: String,
    #[command(flatten)]
    pub gain: GainArgs,
    /// Fixed-point tolerance (∞-norm residual).
    #[arg(long, default_value_t = crate::implicit::DEFAULT_TOL)]
    pub tol: f64,
    /// Initial state, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub x0: String,
    #[arg(long, default_value_t = crate::simulate::DEFAULT_STEPS)]
    pub steps: usize,
    /// Iteration cap per step for `implicit-fp`.
    #[arg(long = "max-iters", default_value_t = crate::simulate::FIXED_POINT_MAX_ITERS)]
    pub max_iters: usize,
    /// Seed each step's hidden state from the previous step (default).
    #[arg(long, overrides_with = "no_warm_start")]
    pub warm_start: bool,
    #[arg(long, overrides_with = "warm_start")]
    pub no_warm_start: bool,
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// oracle | implicit | implicit-fp | explicit
    #[arg(long, default_value = "implicit")]
    pub controller: String,
    #[command(flatten)]
    pub gain: GainArgs,
    /// Grid bounds `lo,hi`, applied to both axes.
    #[arg(long, allow_hyphen_values = true, default_value = "-300,300")]
    pub bounds: String,
    /// Points per axis.
    #[arg(long, default_value_t = crate::simulate::DEFAULT_GRID_RES)]
    pub res: usize,
}

#[derive(Debug, Args)]
pub struct UnravelArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// State at which the hidden iteration runs.
    #[arg(long, allow_hyphen_values = true)]
    pub x0: String,
    /// Scalar gains, comma separated.
    #[arg(long, allow_hyphen_values = true, default_value = "-0.9,0,0.2")]
    pub gains: String,
    #[arg(long = "J", default_value_t = unravel::DEFAULT_DEPTH)]
    pub j: usize,
    /// Residual level whose first crossing is reported.
    #[arg(long, default_value_t = 1e-8)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    #[arg(long)]
    pub problem: PathBuf,
    /// Region report CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Verdict CSV to write (default: next to --out).
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    /// Read regions from a report instead of sampling the problem.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true, default_value = "-300,300")]
    pub bounds: String,
    #[arg(long, default_value_t = crate::simulate::DEFAULT_GRID_RES)]
    pub res: usize,
    #[arg(long = "q-grid", default_value = "0.01,0.1,1,10,100")]
    pub q_grid: String,
    #[arg(long = "r-grid", default_value = "0.01,0.1,1,10,100")]
    pub r_grid: String,
    #[arg(long, default_value_t = pwa::DEFAULT_MARGIN)]
    pub margin: f64,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    msg: String,
}

type CmdResult = std::result::Result<i32, Failure>;

fn fail(code: i32, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

impl From<MpcError> for Failure {
    fn from(e: MpcError) -> Self {
        let code = match e {
            MpcError::Parse { .. } | MpcError::Io(_) => EXIT_PARSE,
            _ => EXIT_NUMERIC,
        };
        fail(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        fail(EXIT_PARSE, e.to_string())
    }
}

fn load_problem(path: &Path) -> std::result::Result<MpcProblem, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| fail(EXIT_PARSE, format!("{}: {e}", path.display())))?;
    format::parse_problem(&text).map_err(|e| {
        let f = Failure::from(e);
        fail(f.code, format!("{}: {}", path.display(), f.msg))
    })
}

fn parse_list(flag: &str, text: &str) -> std::result::Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|t| {
            format::parse_number(t.trim())
                .ok_or_else(|| fail(EXIT_PARSE, format!("--{flag}: bad number `{t}`")))
        })
        .collect()
}

fn parse_state(flag: &str, text: &str, n: usize) -> std::result::Result<Vec<f64>, Failure> {
    let x = parse_list(flag, text)?;
    if x.len() != n {
        return Err(fail(EXIT_PARSE, format!("--{flag} needs {n} entries, got {}", x.len())));
    }
    Ok(x)
}

fn parse_grid(bounds: &str, res: usize) -> std::result::Result<GridSpec, Failure> {
    let b = parse_list("bounds", bounds)?;
    if b.len() != 2 || b[0] > b[1] {
        return Err(fail(EXIT_PARSE, "--bounds must be `lo,hi` with lo <= hi"));
    }
    if res == 0 {
        return Err(fail(EXIT_PARSE, "--res must be at least 1"));
    }
    Ok(GridSpec { lo: b[0], hi: b[1], res })
}

fn parse_controller(text: &str) -> std::result::Result<ControllerKind, Failure> {
    text.parse().map_err(|e: MpcError| fail(EXIT_PARSE, e.to_string()))
}

fn gain_of(args: &GainArgs) -> std::result::Result<Gain, Failure> {
    match &args.k_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| fail(EXIT_PARSE, format!("{}: {e}", path.display())))?;
            Ok(Gain::Full(format::parse_matrix(&text)?))
        }
        None => Ok(Gain::Scalar(args.k)),
    }
}

fn write_file(path: &Path, text: &str) -> std::result::Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| fail(EXIT_NUMERIC, format!("{}: {e}", path.display())))
}

fn cmd_condense(a: &CondenseArgs, out: &mut dyn Write) -> CmdResult {
    let p = load_problem(&a.problem)?;
    let qp = condense(&p)?;
    write_file(&a.out, &format::write_condensed(&qp))?;
    writeln!(
        out,
        "H {}x{}, F {}x{}, n_c = {}",
        qp.h.rows(),
        qp.h.cols(),
        qp.f.rows(),
        qp.f.cols(),
        qp.n_constraints()
    )?;
    Ok(EXIT_OK)
}

fn cmd_export(a: &ExportArgs, out: &mut dyn Write) -> CmdResult {
    let p = load_problem(&a.problem)?;
    let gain = gain_of(&a.gain)?;
    let net = build_implicit(&condense(&p)?)?;
    let text = if a.explicit {
        let cfg = UnravelConfig {
            gain: gain.to_matrix(net.n_c)?,
            depth: a.gain.j,
            tol: crate::implicit::DEFAULT_TOL,
            w0: None,
            early_stop: false,
        };
        format::write_explicit(&unravel::export_explicit(&net, &cfg)?)
    } else {
        format::write_implicit(&net)
    };
    write_file(&a.out, &text)?;
    writeln!(out, "n = {}, m = {}, N = {}, n_c = {}", net.n, net.m, net.horizon, net.n_c)?;
    Ok(EXIT_OK)
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> CmdResult {
    let p = load_problem(&a.problem)?;
    let controller = parse_controller(&a.controller)?;
    let gain = gain_of(&a.gain)?;
    let x0 = parse_state("x0", &a.x0, p.sys().state_dim())?;
    if a.steps == 0 {
        return Err(fail(EXIT_PARSE, "--steps must be at least 1"));
    }
    if !(a.tol > 0.0) {
        return Err(fail(EXIT_PARSE, "--tol must be positive"));
    }
    let stack = ControlStack::new(&p)?;
    let cfg = SimulationConfig {
        x0,
        steps: a.steps,
        controller,
        gain,
        depth: a.gain.j,
        tol: a.tol,
        max_iters: a.max_iters,
        warm_start: !a.no_warm_start,
    };
    let trace = simulate_with(&stack, &p, &cfg)?;
    write_file(&a.out, &format::trace_csv(&trace))?;
    writeln!(
        out,
        "max |u| = {}, final |x|_inf = {}, max residual = {}",
        format::fmt_f64(trace.max_abs_input()),
        format::fmt_f64(linalg::norm_inf(&trace.final_state)),
        format::fmt_f64(trace.max_residual())
    )?;
    if controller != ControllerKind::Oracle && trace.failure.is_none() {
        let oracle = simulate_with(&stack, &p, &SimulationConfig { controller: ControllerKind::Oracle, ..cfg })?;
        let mut dev = 0.0f64;
        for (s, o) in trace.steps.iter().zip(&oracle.steps) {
            dev = dev.max(linalg::norm_inf(&linalg::vec_sub(&s.u, &o.u)));
            dev = dev.max(linalg::norm_inf(&linalg::vec_sub(&s.x, &o.x)));
        }
        writeln!(out, "max deviation from oracle trace = {}", format::fmt_f64(dev))?;
    }
    if let Some((k, msg)) = &trace.failure {
        return Err(fail(EXIT_CONTROLLER, format!("controller failed at step {k}: {msg}")));
    }
    Ok(EXIT_OK)
}

fn cmd_surface(a: &SurfaceArgs, out: &mut dyn Write) -> CmdResult {
    let p = load_problem(&a.problem)?;
    if p.sys().state_dim() != 2 {
        return Err(fail(
            EXIT_MODE,
            format!("surface mode needs 2 states, problem has {}", p.sys().state_dim()),
        ));
    }
    let controller = parse_controller(&a.controller)?;
    let gain = gain_of(&a.gain)?;
    let grid = parse_grid(&a.bounds, a.res)?;
    let stack = ControlStack::new(&p)?;
    let surf = control_surface_with(&stack, &grid, controller, &gain, a.gain.j)?;
    write_file(&a.out, &format::surface_csv(&surf, p.sys().input_dim()))?;
    let missing = surf.iter().filter(|s| s.u.is_none()).count();
    writeln!(out, "{} points, {missing} missing", surf.len())?;
    if controller != ControllerKind::Oracle {
        let oracle = control_surface_with(&stack, &grid, ControllerKind::Oracle, &gain, a.gain.j)?;
        match surface_difference(&surf, &oracle) {
            Some(d) => writeln!(out, "max |u - u_oracle| = {}", format::fmt_f64(d))?,
            None => writeln!(out, "max |u - u_oracle| = n/a (missing points differ)")?,
        }
    }
    Ok(EXIT_OK)
}

fn cmd_unravel(a: &UnravelArgs, out: &mut dyn Write) -> CmdResult {
    let p = load_problem(&a.problem)?;
    let x0 = parse_state("x0", &a.x0, p.sys().state_dim())?;
    let gains = parse_list("gains", &a.gains)?;
    let net = build_implicit(&condense(&p)?)?;
    let traces = gains
        .iter()
        .map(|&k| unravel(&net, &x0, &UnravelConfig::scalar(k, net.n_c, a.j).fixed_depth()))
        .collect::<crate::Result<Vec<_>>>()?;
    write_file(&a.out, &format::unravel_csv(&gains, &traces))?;
    for (k, t) in gains.iter().zip(&traces) {
        match t.first_below(a.threshold) {
            Some(j) => writeln!(out, "K = {}: below {} at layer {j}", format::fmt_f64(*k), format::fmt_f64(a.threshold))?,
            None => writeln!(
                out,
                "K = {}: not below {} within {} layers (final {})",
                format::fmt_f64(*k),
                format::fmt_f64(a.threshold),
                a.j,
                format::fmt_f64(t.final_residual())
            )?,
        }
    }
    Ok(EXIT_OK)
}

fn cmd_recover(a: &RecoverArgs, out: &mut dyn Write) -> CmdResult {
    let p = load_problem(&a.problem)?;
    let q_grid = parse_list("q-grid", &a.q_grid)?;
    let r_grid = parse_list("r-grid", &a.r_grid)?;
    if !(a.margin >= 0.0) {
        return Err(fail(EXIT_PARSE, "--margin must be non-negative"));
    }
    let (n, m) = (p.sys().state_dim(), p.sys().input_dim());
    let regions = match &a.regions {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| fail(EXIT_PARSE, format!("{}: {e}", path.display())))?;
            format::parse_regions_csv(&text, n, m)?
        }
        None => {
            let grid = parse_grid(&a.bounds, a.res)?;
            let qp = condense(&p)?;
            let ex = extract_pwa(&qp, &grid.points(n))?;
            for (k, why) in &ex.skipped {
                writeln!(out, "sample {k} skipped: {why}")?;
            }
            ex.regions
        }
    };
    let verdict_path = a.verdicts.clone().unwrap_or_else(|| a.out.with_extension("verdicts.csv"));
    write_file(&a.out, &format::regions_csv(&regions))?;
    let unsaturated = regions.iter().filter(|r| !r.saturated).count();
    writeln!(out, "{} regions, {unsaturated} unsaturated", regions.len())?;
    if unsaturated == 0 {
        return Err(fail(EXIT_DEGENERATE, "every region is saturated; nothing to recover"));
    }
    match search_cost(p.sys(), &regions, &q_grid, &r_grid, a.margin) {
        Ok(found) => {
            write_file(&verdict_path, &format::verdicts_csv(&found.verdicts))?;
            let worst = found.verdicts.iter().fold(f64::NEG_INFINITY, |w, v| w.max(v.max_eig));
            writeln!(
                out,
                "q = {}, r = {} (worst eigenvalue {})",
                format::fmt_f64(found.q),
                format::fmt_f64(found.r),
                format::fmt_f64(worst)
            )?;
        }
        Err(MpcError::NotFound(why)) => {
            write_file(&verdict_path, &format::verdicts_csv(&[]))?;
            writeln!(out, "NOT-FOUND ({why})")?;
        }
        Err(e) => return Err(e.into()),
    }
    Ok(EXIT_OK)
}

fn thread_cap() -> std::result::Result<Option<usize>, Failure> {
    match std::env::var("MPCNET_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(fail(EXIT_PARSE, format!("MPCNET_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    match &cli.command {
        Command::Condense(a) => cmd_condense(a, out),
        Command::Export(a) => cmd_export(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Surface(a) => cmd_surface(a, out),
        Command::Unravel(a) => cmd_unravel(a, out),
        Command::Recover(a) => cmd_recover(a, out),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = thread_cap().and_then(|cap| {
        if let Some(n) = cap {
            // the global pool can only be configured once per process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        dispatch(&cli, out)
    });
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.msg);
            f.code
        }
    }
}
