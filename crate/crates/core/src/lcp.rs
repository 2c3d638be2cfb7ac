//! Ground-truth solver for the MPC-QP through its KKT conditions.
//!
//! The multipliers solve the linear complementarity problem
//!
//! ```text
//!   0 ≤ λ ⊥ q + M λ ≥ 0,     M = G H⁻¹ Gᵀ,  q = S x + w
//! ```
//!
//! and the optimal sequence follows as `u* = -H⁻¹ F x - H⁻¹ Gᵀ λ`.
//! Nothing here touches the network representation.

use crate::condense::CondensedQp;
use crate::error::{MpcError, Result};
use crate::linalg::{self, Matrix};

/// Diagonal entries at or below this are treated as zero for PGS.
const MIN_DIAG: f64 = 1e-12;
/// Acceptance slack on signs in the active-set enumeration.
const ENUM_SIGN_TOL: f64 = 1e-10;
pub const MAX_ENUM_SIZE: usize = 20;
pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LcpProblem {
    pub m: Matrix,
    pub q: Vec<f64>,
}

impl LcpProblem {
    pub fn new(m: Matrix, q: Vec<f64>) -> Result<Self> {
        if !m.is_square() || m.rows() != q.len() {
            return Err(MpcError::DimensionMismatch(format!(
                "LCP matrix {}x{} with offset of length {}",
                m.rows(),
                m.cols(),
                q.len()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::InvalidProblem("LCP offset is not finite".into()));
        }
        Ok(Self { m, q })
    }

    /// LCP of the MPC-QP at state `x`.
    pub fn from_qp(qp: &CondensedQp, x: &[f64]) -> Result<Self> {
        Self::new(qp.lcp_matrix()?, qp.lcp_offset(x)?)
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn slack(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::vec_add(&self.q, &self.m.mat_vec(lambda)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcpSolution {
    pub lambda: Vec<f64>,
    /// `q + M λ`.
    pub slack: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LcpSolution {
    /// Indices with `λᵢ > threshold`, ascending.
    pub fn active_set(&self, threshold: f64) -> Vec<usize> {
        (0..self.lambda.len())
            .filter(|&i| self.lambda[i] > threshold)
            .collect()
    }

    /// `max |λᵢ · slackᵢ|`.
    pub fn complementarity(&self) -> f64 {
        self.lambda
            .iter()
            .zip(&self.slack)
            .fold(0.0f64, |m, (l, s)| m.max((l * s).abs()))
    }
}

/// Stopping measure: natural-map residual `|min(λ, s)|` combined with the
/// scaled complementarity product.
pub fn lcp_residual(lambda: &[f64], slack: &[f64], q_scale: f64) -> f64 {
    lambda
        .iter()
        .zip(slack)
        .map(|(&l, &s)| l.min(s).abs().max((l * s).abs() / (1.0 + q_scale)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgsOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl PgsOptions {
    /// `100·n²` sweeps at tolerance `1e-10`.
    pub fn for_dim(n: usize) -> Self {
        Self {
            max_iters: (100 * n * n).max(100),
            tol: DEFAULT_TOL,
        }
    }
}

/// Projected Gauss–Seidel sweeps from `λ = 0`. Never fails; check
/// `converged` on the result.
pub fn pgs_sweeps(l: &LcpProblem, max_iters: usize, tol: f64) -> Result<LcpSolution> {
    let n = l.dim();
    let q_scale = linalg::norm_inf(&l.q);
    let mut lambda = vec![0.0; n];
    let mut slack = l.q.clone();
    if n == 0 || lcp_residual(&lambda, &slack, q_scale) <= tol {
        return Ok(LcpSolution {
            lambda,
            slack,
            iterations: 0,
            converged: true,
        });
    }
    for sweep in 1..=max_iters {
        for i in 0..n {
            let row = l.m.row(i);
            let r = l.q[i] + linalg::dot(row, &lambda);
            lambda[i] = (lambda[i] - r / row[i]).max(0.0);
        }
        slack = l.slack(&lambda)?;
        if lcp_residual(&lambda, &slack, q_scale) <= tol {
            return Ok(LcpSolution {
                lambda,
                slack,
                iterations: sweep,
                converged: true,
            });
        }
    }
    Ok(LcpSolution {
        lambda,
        slack,
        iterations: max_iters,
        converged: false,
    })
}

/// Projected Gauss–Seidel. Falls back to enumeration when some diagonal
/// entry of `M` vanishes.
pub fn solve_lcp_pgs(l: &LcpProblem, max_iters: usize, tol: f64) -> Result<LcpSolution> {
    if l.m.diag().iter().any(|&d| d <= MIN_DIAG) {
        if l.dim() <= MAX_ENUM_SIZE {
            return solve_lcp_enum(l);
        }
        return Err(MpcError::InvalidProblem(format!(
            "LCP of size {} has a vanishing diagonal and is too large to enumerate",
            l.dim()
        )));
    }
    let sol = pgs_sweeps(l, max_iters, tol)?;
    if !sol.converged {
        let residual = lcp_residual(&sol.lambda, &sol.slack, linalg::norm_inf(&l.q));
        return Err(MpcError::NoConvergence {
            iterations: sol.iterations,
            residual,
        });
    }
    Ok(polish(l, sol)?)
}

/// Sign tolerance, relative to `1 + ‖q‖∞`, used while pivoting.
const PIVOT_SIGN_TOL: f64 = 1e-13;

/// Re-solves the active block exactly once PGS has roughly identified it.
/// PGS stops at a residual of `tol`, which on ill-conditioned `M` can leave
/// `λ` far from the solution. Starting from the PGS active set, least-index
/// principal pivoting flips one wrongly classified index at a time until
/// the block solution is complementary. Falls back to the PGS iterate if the
/// pivoting hits a singular block or runs too long.
fn polish(l: &LcpProblem, sol: LcpSolution) -> Result<LcpSolution> {
    let n = l.dim();
    let tol = PIVOT_SIGN_TOL * (1.0 + linalg::norm_inf(&l.q));
    let mut active: Vec<bool> = (0..n).map(|i| sol.lambda[i] > sol.slack[i]).collect();
    for _ in 0..(4 * n + 4) {
        let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        let mut lambda = vec![0.0; n];
        if !idx.is_empty() {
            let rhs: Vec<f64> = idx.iter().map(|&i| -l.q[i]).collect();
            let Ok(block) = linalg::solve_general(&l.m.select(&idx, &idx), &rhs) else {
                return Ok(sol);
            };
            for (&i, v) in idx.iter().zip(block) {
                lambda[i] = v;
            }
        }
        let slack = l.slack(&lambda)?;
        let wrong = (0..n).find(|&i| if active[i] { lambda[i] < -tol } else { slack[i] < -tol });
        match wrong {
            Some(i) => active[i] = !active[i],
            None => {
                for v in &mut lambda {
                    *v = v.max(0.0);
                }
                let mut slack = l.slack(&lambda)?;
                for i in idx {
                    slack[i] = slack[i].max(0.0);
                }
                return Ok(LcpSolution {
                    lambda,
                    slack,
                    iterations: sol.iterations,
                    converged: true,
                });
            }
        }
    }
    Ok(sol)
}

/// Largest LCP that [`solve_lcp`] will enumerate when PGS stalls.
pub const ENUM_FALLBACK_SIZE: usize = 12;

/// Default solver: PGS with default options. If PGS stalls, its last iterate
/// still usually identifies the active set, so that is tried first, then
/// enumeration for small problems.
pub fn solve_lcp(l: &LcpProblem) -> Result<LcpSolution> {
    let opts = PgsOptions::for_dim(l.dim());
    match solve_lcp_pgs(l, opts.max_iters, opts.tol) {
        Err(MpcError::NoConvergence { iterations, residual }) => {
            let last = pgs_sweeps(l, opts.max_iters, opts.tol)?;
            let polished = polish(l, last)?;
            let q_scale = linalg::norm_inf(&l.q);
            if polished.lambda.iter().all(|&v| v >= 0.0)
                && lcp_residual(&polished.lambda, &l.slack(&polished.lambda)?, q_scale) <= opts.tol
            {
                return Ok(polished);
            }
            if l.dim() <= ENUM_FALLBACK_SIZE {
                return solve_lcp_enum(l);
            }
            Err(MpcError::NoConvergence { iterations, residual })
        }
        other => other,
    }
}

/// Advances `idx` to the next k-combination of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    for i in (0..k).rev() {
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in (i + 1)..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Brute-force oracle: tries every active set, smallest first, and returns
/// the first one whose multipliers and inactive slacks are nonnegative.
pub fn solve_lcp_enum(l: &LcpProblem) -> Result<LcpSolution> {
    let n = l.dim();
    if n > MAX_ENUM_SIZE {
        return Err(MpcError::InvalidProblem(format!(
            "enumeration limited to {MAX_ENUM_SIZE} constraints, got {n}"
        )));
    }
    let mut tried = 0usize;
    for k in 0..=n {
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            tried += 1;
            if let Some(sol) = try_active_set(l, &idx)? {
                return Ok(LcpSolution {
                    iterations: tried,
                    ..sol
                });
            }
            if k == 0 || !next_combination(&mut idx, n) {
                break;
            }
        }
    }
    Err(MpcError::Infeasible)
}

fn try_active_set(l: &LcpProblem, active: &[usize]) -> Result<Option<LcpSolution>> {
    let n = l.dim();
    let mut lambda = vec![0.0; n];
    if !active.is_empty() {
        let m_aa = l.m.select(active, active);
        let rhs: Vec<f64> = active.iter().map(|&i| -l.q[i]).collect();
        let Ok(sol) = linalg::solve_general(&m_aa, &rhs) else {
            return Ok(None);
        };
        if sol.iter().any(|&v| v < -ENUM_SIGN_TOL) {
            return Ok(None);
        }
        for (&i, v) in active.iter().zip(sol) {
            lambda[i] = v.max(0.0);
        }
    }
    let mut slack = l.slack(&lambda)?;
    let mut is_active = vec![false; n];
    for &i in active {
        is_active[i] = true;
        slack[i] = 0.0;
    }
    let scale = 1.0 + linalg::norm_inf(&l.q);
    if (0..n).any(|i| !is_active[i] && slack[i] < -ENUM_SIGN_TOL * scale) {
        return Ok(None);
    }
    Ok(Some(LcpSolution {
        lambda,
        slack,
        iterations: 0,
        converged: true,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖H u + F x + Gᵀ λ‖∞`
    pub stationarity: f64,
    /// `max |λᵢ · slackᵢ|` together with any negative multiplier.
    pub complementarity: f64,
    /// `max(0, G u - S_u x - w)`
    pub primal_violation: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.complementarity)
            .max(self.primal_violation)
    }
}

pub fn kkt_residuals(
    qp: &CondensedQp,
    x: &[f64],
    useq: &[f64],
    lambda: &[f64],
) -> Result<KktResiduals> {
    if useq.len() != qp.n_inputs() || lambda.len() != qp.n_constraints() || x.len() != qp.n {
        return Err(MpcError::DimensionMismatch(format!(
            "KKT check with |x|={}, |u|={}, |λ|={}",
            x.len(),
            useq.len(),
            lambda.len()
        )));
    }
    let mut grad = linalg::vec_add(&qp.h.mat_vec(useq)?, &qp.f.mat_vec(x)?);
    if !lambda.is_empty() {
        grad = linalg::vec_add(&grad, &qp.g.transpose().mat_vec(lambda)?);
    }
    let slack = qp.constraint_slack(x, useq)?;
    let complementarity = lambda
        .iter()
        .zip(&slack)
        .fold(0.0f64, |m, (l, s)| m.max((l * s).abs()).max(-l));
    let primal_violation = slack.iter().fold(0.0f64, |m, s| m.max(-s));
    Ok(KktResiduals {
        stationarity: linalg::norm_inf(&grad),
        complementarity,
        primal_violation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vec<f64>,
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub kkt: KktResiduals,
}

/// Solves the MPC-QP at `x` through its LCP.
pub fn solve_qp_via_kkt(qp: &CondensedQp, x: &[f64]) -> Result<QpSolution> {
    let unconstrained = qp.unconstrained(x)?;
    if qp.n_constraints() == 0 {
        let kkt = kkt_residuals(qp, x, &unconstrained, &[])?;
        return Ok(QpSolution {
            u: unconstrained,
            lambda: Vec::new(),
            iterations: 0,
            kkt,
        });
    }
    let lcp = LcpProblem::from_qp(qp, x)?;
    let sol = solve_lcp(&lcp)?;
    let glam = qp.g.transpose().mat_vec(&sol.lambda)?;
    let correction = qp.factor().solve_vec(&glam)?;
    let u = linalg::vec_sub(&unconstrained, &correction);
    let kkt = kkt_residuals(qp, x, &u, &sol.lambda)?;
    Ok(QpSolution {
        u,
        lambda: sol.lambda,
        iterations: sol.iterations,
        kkt,
    })
}
