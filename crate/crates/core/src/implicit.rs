//! Implicit ReLU network that reproduces the MPC law exactly:
//!
//! ```text
//!   y = W relu(y) + Y x + b
//!   u = W_f relu(y) + Y_f x + b_f
//! ```
//!
//! with `W = I - G H⁻¹ Gᵀ`, `Y = -S`, `b = -w`, `W_f = -H⁻¹ Gᵀ`,
//! `Y_f = -H⁻¹ F` and `b_f = 0`.

use crate::condense::CondensedQp;
use crate::error::{MpcError, Result};
use crate::lcp::{self, LcpProblem};
use crate::linalg::{self, Matrix};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 100_000;
/// Agreement required between `relu(y)` and the LCP multipliers.
const RECONSTRUCTION_TOL: f64 = 1e-7;

pub fn relu(s: &[f64]) -> Vec<f64> {
    s.iter().map(|&v| if v >= 0.0 { v } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitNet {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub n_c: usize,
    /// n_c × n_c
    pub w: Matrix,
    /// n_c × n
    pub y: Matrix,
    pub b: Vec<f64>,
    /// (N·m) × n_c
    pub w_f: Matrix,
    /// (N·m) × n
    pub y_f: Matrix,
    pub b_f: Vec<f64>,
}

/// Writes down the network weights for a condensed QP.
pub fn build_implicit(qp: &CondensedQp) -> Result<ImplicitNet> {
    let n_c = qp.n_constraints();
    let nu = qp.n_inputs();
    let y_f = qp.h_solve(&qp.f)?.neg();
    let (w, w_f) = if n_c == 0 {
        (Matrix::zeros(0, 0), Matrix::zeros(nu, 0))
    } else {
        let hig = qp.h_solve(&qp.g.transpose())?;
        let m = qp.g.matmul(&hig)?.symmetrize()?;
        (Matrix::identity(n_c).sub(&m)?, hig.neg())
    };
    Ok(ImplicitNet {
        n: qp.n,
        m: qp.m,
        horizon: qp.horizon,
        n_c,
        w,
        y: qp.s.neg(),
        b: linalg::vec_scale(&qp.w, -1.0),
        w_f,
        y_f,
        b_f: vec![0.0; nu],
    })
}

impl ImplicitNet {
    /// Network input term `ζ = Y x + b`, equal to `-(S x + w)`.
    pub fn drive(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        Ok(linalg::vec_add(&self.y.mat_vec(x)?, &self.b))
    }

    /// `‖y - W relu(y) - Y x - b‖∞`.
    pub fn residual(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let zeta = self.drive(x)?;
        self.residual_with_drive(&zeta, y)
    }

    pub(crate) fn residual_with_drive(&self, zeta: &[f64], y: &[f64]) -> Result<f64> {
        if y.len() != self.n_c {
            return Err(MpcError::DimensionMismatch(format!(
                "hidden vector of length {}, expected {}",
                y.len(),
                self.n_c
            )));
        }
        let wy = self.w.mat_vec(&relu(y))?;
        Ok(y.iter()
            .zip(&wy)
            .zip(zeta)
            .fold(0.0f64, |m, ((yi, wi), zi)| m.max((yi - wi - zi).abs())))
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(MpcError::DimensionMismatch(format!(
                "state of length {}, expected {}",
                x.len(),
                self.n
            )));
        }
        Ok(())
    }

    /// `M = I - W`, the LCP matrix encoded in the hidden weights.
    pub fn lcp_matrix(&self) -> Result<Matrix> {
        Ok(Matrix::identity(self.n_c).sub(&self.w)?)
    }

    /// Evaluates the network at `x` (hidden state through the LCP route).
    pub fn control(&self, x: &[f64]) -> Result<Vec<f64>> {
        let fp = solve_via_lcp(self, x)?;
        eval_net(self, &fp.y, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub y: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates `w ← Dφ(w) + ζ + K(w - Dφ(w) - ζ)` until the residual
/// `‖w - Dφ(w) - ζ‖∞` drops to `tol`.
pub fn solve_fixed_point(
    net: &ImplicitNet,
    x: &[f64],
    gain: &Matrix,
    w0: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<FixedPointResult> {
    let zeta = net.drive(x)?;
    let n_c = net.n_c;
    if gain.shape() != (n_c, n_c) || w0.len() != n_c {
        return Err(MpcError::DimensionMismatch(format!(
            "gain {}x{} and initial vector of length {} for hidden size {n_c}",
            gain.rows(),
            gain.cols(),
            w0.len()
        )));
    }
    let mut w = w0.to_vec();
    for it in 0..=max_iters {
        let dphi = net.w.mat_vec(&relu(&w))?;
        let r: Vec<f64> = w
            .iter()
            .zip(&dphi)
            .zip(&zeta)
            .map(|((wi, di), zi)| wi - di - zi)
            .collect();
        let residual = linalg::norm_inf(&r);
        if residual <= tol {
            return Ok(FixedPointResult {
                y: w,
                residual,
                iterations: it,
                converged: true,
            });
        }
        if it == max_iters {
            return Err(MpcError::NoConvergence {
                iterations: it,
                residual,
            });
        }
        let kr = gain.mat_vec(&r)?;
        w = dphi
            .iter()
            .zip(&zeta)
            .zip(&kr)
            .map(|((di, zi), ki)| di + zi + ki)
            .collect();
    }
    unreachable!("loop returns on its last iteration")
}

/// Hidden state from the complementarity route: `λ` solves the LCP built
/// from the network weights, then `y = W λ + ζ`.
pub fn solve_via_lcp(net: &ImplicitNet, x: &[f64]) -> Result<FixedPointResult> {
    let zeta = net.drive(x)?;
    if net.n_c == 0 {
        return Ok(FixedPointResult {
            y: Vec::new(),
            residual: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let q = linalg::vec_scale(&zeta, -1.0);
    let problem = LcpProblem::new(net.lcp_matrix()?.symmetrize()?, q)?;
    let sol = lcp::solve_lcp(&problem)?;
    let y = linalg::vec_add(&net.w.mat_vec(&sol.lambda)?, &zeta);

    let mismatch = linalg::norm_inf(&linalg::vec_sub(&relu(&y), &sol.lambda));
    // size of the terms summed into y; rounding in Wλ grows with it
    let scale = 1.0 + net.w.norm_inf() * linalg::norm_inf(&sol.lambda) + linalg::norm_inf(&zeta);
    if mismatch > RECONSTRUCTION_TOL * scale {
        return Err(MpcError::ReconstructionMismatch(mismatch));
    }
    let residual = net.residual_with_drive(&zeta, &y)?;
    if residual > RECONSTRUCTION_TOL * scale {
        return Err(MpcError::ReconstructionMismatch(residual));
    }
    Ok(FixedPointResult {
        y,
        residual,
        iterations: sol.iterations,
        converged: true,
    })
}

/// Output layer `u = W_f relu(y) + Y_f x + b_f`.
pub fn eval_net(net: &ImplicitNet, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    net.check_state(x)?;
    let mut u = linalg::vec_add(&net.y_f.mat_vec(x)?, &net.b_f);
    if net.n_c > 0 {
        u = linalg::vec_add(&u, &net.w_f.mat_vec(&relu(y))?);
    }
    Ok(u)
}
