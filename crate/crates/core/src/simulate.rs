//! Closed-loop simulation of the plant under any of the MPC
//! representations, and state-space sweeps of the resulting control law.

use rayon::prelude::*;

use crate::condense::{condense, first_input, CondensedQp, MpcProblem};
use crate::error::{MpcError, Result};
use crate::implicit::{self, build_implicit, eval_net, ImplicitNet};
use crate::lcp::solve_qp_via_kkt;
use crate::linalg::Matrix;
use crate::unravel::{export_explicit, ExplicitNet, UnravelConfig};

pub const DEFAULT_STEPS: usize = 30;
pub const DEFAULT_GRID_BOUNDS: (f64, f64) = (-300.0, 300.0);
pub const DEFAULT_GRID_RES: usize = 25;
/// Iteration cap for the fixed-point controller.
pub const FIXED_POINT_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    /// KKT/LCP solve of the QP.
    Oracle,
    /// Implicit network, hidden state from the complementarity route.
    ImplicitLcp,
    /// Implicit network, hidden state by the gain-accelerated iteration.
    ImplicitFixedPoint,
    /// Fixed-depth unravelled network.
    ExplicitUnravelled,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::ImplicitLcp => "implicit",
            Self::ImplicitFixedPoint => "implicit-fp",
            Self::ExplicitUnravelled => "explicit",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = MpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "implicit" | "implicit-lcp" => Ok(Self::ImplicitLcp),
            "implicit-fp" | "implicit-fixed-point" => Ok(Self::ImplicitFixedPoint),
            "explicit" | "explicit-unravelled" => Ok(Self::ExplicitUnravelled),
            other => Err(MpcError::InvalidProblem(format!("unknown controller `{other}`"))),
        }
    }
}

/// Unravelling gain: `k·I` or a full matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Gain {
    Scalar(f64),
    Full(Matrix),
}

impl Gain {
    pub fn to_matrix(&self, n_c: usize) -> Result<Matrix> {
        match self {
            Gain::Scalar(k) => Ok(Matrix::identity(n_c).scale(*k)),
            Gain::Full(m) if m.shape() == (n_c, n_c) => Ok(m.clone()),
            Gain::Full(m) => Err(MpcError::DimensionMismatch(format!(
                "gain is {}x{}, hidden width is {n_c}",
                m.rows(),
                m.cols()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub x0: Vec<f64>,
    pub steps: usize,
    pub controller: ControllerKind,
    pub gain: Gain,
    /// Depth of the explicit network.
    pub depth: usize,
    pub tol: f64,
    /// Iteration cap for the fixed-point controller.
    pub max_iters: usize,
    pub warm_start: bool,
}

impl SimulationConfig {
    pub fn new(x0: Vec<f64>, controller: ControllerKind) -> Self {
        Self {
            x0,
            steps: DEFAULT_STEPS,
            controller,
            gain: Gain::Scalar(crate::unravel::DEFAULT_GAIN),
            depth: crate::unravel::DEFAULT_DEPTH,
            tol: implicit::DEFAULT_TOL,
            max_iters: FIXED_POINT_MAX_ITERS,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<f64>,
    /// Applied input (first block of the optimal sequence).
    pub u: Vec<f64>,
    pub iterations: usize,
    /// Oracle: worst KKT residual. Networks: hidden-state fixed-point residual.
    pub residual: f64,
    /// Largest violation of `G u ≤ S_u x + w` by the full predicted sequence.
    pub constraint_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub controller: ControllerKind,
    pub config: SimulationConfig,
    /// Input dimension, kept so that empty traces still know their columns.
    pub input_dim: usize,
    pub steps: Vec<StepRecord>,
    /// State after the last recorded step.
    pub final_state: Vec<f64>,
    /// Step index and message if the controller failed.
    pub failure: Option<(usize, String)>,
}

impl SimulationTrace {
    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(|s| s.u.as_slice())
    }

    pub fn max_abs_input(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| s.u.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_residual(&self) -> f64 {
        self.steps.iter().fold(0.0f64, |m, s| m.max(s.residual))
    }

    pub fn total_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.iterations).sum()
    }
}

/// The three representations of one MPC law, built once.
pub struct ControlStack {
    pub qp: CondensedQp,
    pub net: ImplicitNet,
}

impl ControlStack {
    pub fn new(p: &MpcProblem) -> Result<Self> {
        let qp = condense(p)?;
        let net = build_implicit(&qp)?;
        Ok(Self { qp, net })
    }

    pub fn explicit(&self, gain: &Gain, depth: usize) -> Result<ExplicitNet> {
        let cfg = UnravelConfig {
            gain: gain.to_matrix(self.net.n_c)?,
            depth,
            tol: implicit::DEFAULT_TOL,
            w0: None,
            early_stop: false,
        };
        export_explicit(&self.net, &cfg)
    }
}

struct StepOutput {
    useq: Vec<f64>,
    iterations: usize,
    residual: f64,
    hidden: Vec<f64>,
}

fn oracle_step(stack: &ControlStack, x: &[f64]) -> Result<StepOutput> {
    let sol = solve_qp_via_kkt(&stack.qp, x)?;
    Ok(StepOutput {
        iterations: sol.iterations,
        residual: sol.kkt.max(),
        useq: sol.u,
        hidden: Vec::new(),
    })
}

fn implicit_lcp_step(stack: &ControlStack, x: &[f64]) -> Result<StepOutput> {
    let fp = implicit::solve_via_lcp(&stack.net, x)?;
    Ok(StepOutput {
        useq: eval_net(&stack.net, &fp.y, x)?,
        iterations: fp.iterations,
        residual: fp.residual,
        hidden: fp.y,
    })
}

/// Closed-loop run. Controller failures end the run early and are reported
/// in the trace; only setup errors are returned as `Err`.
pub fn simulate(p: &MpcProblem, cfg: &SimulationConfig) -> Result<SimulationTrace> {
    let stack = ControlStack::new(p)?;
    simulate_with(&stack, p, cfg)
}

pub fn simulate_with(
    stack: &ControlStack,
    p: &MpcProblem,
    cfg: &SimulationConfig,
) -> Result<SimulationTrace> {
    let n = p.sys().state_dim();
    let m = p.sys().input_dim();
    if cfg.x0.len() != n {
        return Err(MpcError::DimensionMismatch(format!(
            "initial state of length {}, expected {n}",
            cfg.x0.len()
        )));
    }
    if cfg.steps == 0 {
        return Err(MpcError::InvalidProblem("simulation needs at least one step".into()));
    }
    let n_c = stack.net.n_c;
    let gain = cfg.gain.to_matrix(n_c)?;
    let explicit = match cfg.controller {
        ControllerKind::ExplicitUnravelled => Some(stack.explicit(&cfg.gain, cfg.depth)?),
        _ => None,
    };

    // Warm-start memory for the iterative controllers.
    let mut hidden: Option<Vec<f64>> = None;
    let mut x = cfg.x0.clone();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut failure = None;

    for k in 0..cfg.steps {
        let warm = if cfg.warm_start { hidden.clone() } else { None };
        let out = match cfg.controller {
            ControllerKind::Oracle => oracle_step(stack, &x),
            ControllerKind::ImplicitLcp => implicit_lcp_step(stack, &x),
            ControllerKind::ImplicitFixedPoint => {
                let w0 = warm.unwrap_or_else(|| vec![0.0; n_c]);
                implicit::solve_fixed_point(&stack.net, &x, &gain, &w0, cfg.tol, cfg.max_iters)
                    .and_then(|fp| {
                        Ok(StepOutput {
                            useq: eval_net(&stack.net, &fp.y, &x)?,
                            iterations: fp.iterations,
                            residual: fp.residual,
                            hidden: fp.y,
                        })
                    })
            }
            ControllerKind::ExplicitUnravelled => {
                let net = explicit.as_ref().expect("built above");
                let w0 = warm.unwrap_or_else(|| net.w0.clone());
                net.hidden_from(&x, &w0).and_then(|w| {
                    Ok(StepOutput {
                        useq: net.output(&w, &x)?,
                        iterations: net.depth,
                        residual: stack.net.residual(&x, &w)?,
                        hidden: w,
                    })
                })
            }
        };
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                failure = Some((k, e.to_string()));
                break;
            }
        };
        let u = first_input(&out.useq, m)?;
        let constraint_violation = stack.qp.constraint_violation(&x, &out.useq)?;
        let next = p.sys().step(&x, &u)?;
        steps.push(StepRecord {
            k,
            x: std::mem::replace(&mut x, next),
            u,
            iterations: out.iterations,
            residual: out.residual,
            constraint_violation,
        });
        hidden = Some(out.hidden);
    }

    Ok(SimulationTrace {
        controller: cfg.controller,
        config: cfg.clone(),
        input_dim: m,
        steps,
        final_state: x,
        failure,
    })
}

/// Square grid `[lo, hi]^n` with `res` points per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub res: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: DEFAULT_GRID_BOUNDS.0,
            hi: DEFAULT_GRID_BOUNDS.1,
            res: DEFAULT_GRID_RES,
        }
    }
}

impl GridSpec {
    pub fn axis(&self) -> Vec<f64> {
        match self.res {
            0 => Vec::new(),
            1 => vec![0.5 * (self.lo + self.hi)],
            r => (0..r)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (r - 1) as f64)
                .collect(),
        }
    }

    /// All grid points in row-major order (last coordinate fastest).
    pub fn points(&self, dim: usize) -> Vec<Vec<f64>> {
        let axis = self.axis();
        let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
        for _ in 0..dim {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&a| {
                        let mut q = p.clone();
                        q.push(a);
                        q
                    })
                })
                .collect();
        }
        pts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePoint {
    pub x: Vec<f64>,
    /// `None` when the controller failed at this state.
    pub u: Option<Vec<f64>>,
}

/// Evaluates a controller on every grid point. Explicit networks start from
/// their stored `w[0]` at each point.
pub fn control_surface(
    p: &MpcProblem,
    grid: &GridSpec,
    controller: ControllerKind,
    gain: &Gain,
    depth: usize,
) -> Result<Vec<SurfacePoint>> {
    let stack = ControlStack::new(p)?;
    control_surface_with(&stack, grid, controller, gain, depth)
}

pub fn control_surface_with(
    stack: &ControlStack,
    grid: &GridSpec,
    controller: ControllerKind,
    gain: &Gain,
    depth: usize,
) -> Result<Vec<SurfacePoint>> {
    let m = stack.qp.m;
    let n_c = stack.net.n_c;
    let k = gain.to_matrix(n_c)?;
    let explicit = match controller {
        ControllerKind::ExplicitUnravelled => Some(stack.explicit(gain, depth)?),
        _ => None,
    };
    let eval = |x: &[f64]| -> Result<Vec<f64>> {
        let useq = match controller {
            ControllerKind::Oracle => solve_qp_via_kkt(&stack.qp, x)?.u,
            ControllerKind::ImplicitLcp => stack.net.control(x)?,
            ControllerKind::ImplicitFixedPoint => {
                let fp = implicit::solve_fixed_point(
                    &stack.net,
                    x,
                    &k,
                    &vec![0.0; n_c],
                    implicit::DEFAULT_TOL,
                    FIXED_POINT_MAX_ITERS,
                )?;
                eval_net(&stack.net, &fp.y, x)?
            }
            ControllerKind::ExplicitUnravelled => explicit.as_ref().expect("built above").forward(x)?,
        };
        first_input(&useq, m)
    };
    Ok(grid
        .points(stack.qp.n)
        .into_par_iter()
        .map(|x| {
            let u = eval(&x).ok();
            SurfacePoint { x, u }
        })
        .collect())
}

/// Largest `‖u_a - u_b‖∞` over points where both surfaces are defined;
/// `None` if the grids differ or a point is missing on only one side.
pub fn surface_difference(a: &[SurfacePoint], b: &[SurfacePoint]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut worst = 0.0f64;
    for (pa, pb) in a.iter().zip(b) {
        if pa.x != pb.x {
            return None;
        }
        match (&pa.u, &pb.u) {
            (Some(ua), Some(ub)) => {
                for (x, y) in ua.iter().zip(ub) {
                    worst = worst.max((x - y).abs());
                }
            }
            (None, None) => {}
            _ => return None,
        }
    }
    Some(worst)
}
