//! Unravelling the implicit network into a finite-depth feed-forward one.
//!
//! With `D = W = I - G H⁻¹ Gᵀ` and `ζ = -(S x + w)`, each layer applies
//!
//! ```text
//!   w[j+1] = D φ(w[j]) + ζ + K (w[j] - D φ(w[j]) - ζ)
//!          = K w[j] + (I - K) D φ(w[j]) + (I - K) ζ
//! ```
//!
//! and the error `e[j] = w[j] - y(x)` follows the Lurie recursion
//! `e[j+1] = K e[j] + (I - K) D (φ(w[j]) - φ(y(x)))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MpcError, Result};
use crate::implicit::{relu, solve_via_lcp, ImplicitNet};
use crate::linalg::{self, Matrix};

pub const DEFAULT_DEPTH: usize = 1000;
pub const DEFAULT_GAIN: f64 = -0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct UnravelConfig {
    pub gain: Matrix,
    pub depth: usize,
    pub tol: f64,
    /// Initial hidden vector; all-ones when `None`.
    pub w0: Option<Vec<f64>>,
    /// Stop at the first layer whose residual is within `tol`.
    pub early_stop: bool,
}

impl UnravelConfig {
    /// `K = k·I` for a hidden layer of width `n_c`.
    pub fn scalar(k: f64, n_c: usize, depth: usize) -> Self {
        Self {
            gain: Matrix::identity(n_c).scale(k),
            depth,
            tol: crate::implicit::DEFAULT_TOL,
            w0: None,
            early_stop: true,
        }
    }

    pub fn with_w0(mut self, w0: Vec<f64>) -> Self {
        self.w0 = Some(w0);
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn fixed_depth(mut self) -> Self {
        self.early_stop = false;
        self
    }

    fn initial(&self, n_c: usize) -> Vec<f64> {
        self.w0.clone().unwrap_or_else(|| vec![1.0; n_c])
    }

    fn validate(&self, n_c: usize) -> Result<()> {
        if self.gain.shape() != (n_c, n_c) {
            return Err(MpcError::DimensionMismatch(format!(
                "gain is {}x{}, hidden width is {n_c}",
                self.gain.rows(),
                self.gain.cols()
            )));
        }
        if let Some(w0) = &self.w0 {
            if w0.len() != n_c {
                return Err(MpcError::DimensionMismatch(format!(
                    "initial vector of length {}, hidden width is {n_c}",
                    w0.len()
                )));
            }
        }
        if !(self.tol > 0.0) {
            return Err(MpcError::InvalidProblem("unravel tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnravelTrace {
    /// `w[0] … w[J]` (shorter when stopped early).
    pub iterates: Vec<Vec<f64>>,
    /// `‖w[j] - D φ(w[j]) - ζ‖∞` for each stored iterate.
    pub residuals: Vec<f64>,
    pub converged_at: Option<usize>,
}

impl UnravelTrace {
    pub fn last(&self) -> &[f64] {
        self.iterates.last().expect("trace always holds w[0]")
    }

    pub fn final_residual(&self) -> f64 {
        *self.residuals.last().expect("trace always holds r[0]")
    }

    /// First layer whose residual is at or below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.residuals.iter().position(|&r| r <= threshold)
    }
}

/// Finite-depth explicit network with layer-invariant weights.
///
/// Layer `j` maps `w[j]` to
/// `w[j+1] = skip·w[j] + act·φ(w[j]) + input·x + bias`, so each layer is the
/// pair `(w[j], φ(w[j]))` feeding the next pre-activation; the recurrence only
/// connects consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitNet {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub n_c: usize,
    pub depth: usize,
    /// `K`
    pub skip: Matrix,
    /// `(I - K) D`
    pub act: Matrix,
    /// `(I - K)(-S)`
    pub input: Matrix,
    /// `(I - K)(-w)`
    pub bias: Vec<f64>,
    pub w_f: Matrix,
    pub y_f: Matrix,
    pub b_f: Vec<f64>,
    pub w0: Vec<f64>,
}

impl ExplicitNet {
    /// `input·x + bias`, shared by every layer.
    pub fn layer_drive(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::vec_add(&self.input.mat_vec(x)?, &self.bias))
    }

    /// One hidden layer.
    pub fn layer(&self, w: &[f64], drive: &[f64]) -> Vec<f64> {
        let phi = relu(w);
        (0..self.n_c)
            .map(|i| linalg::dot(self.skip.row(i), w) + linalg::dot(self.act.row(i), &phi) + drive[i])
            .collect()
    }

    /// `w[J]` starting from the stored `w[0]`.
    pub fn hidden(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.hidden_from(x, &self.w0)
    }

    /// `w[J]` from a caller-supplied `w[0]` (warm start).
    pub fn hidden_from(&self, x: &[f64], w0: &[f64]) -> Result<Vec<f64>> {
        if w0.len() != self.n_c {
            return Err(MpcError::DimensionMismatch(format!(
                "initial vector of length {}, hidden width is {}",
                w0.len(),
                self.n_c
            )));
        }
        let drive = self.layer_drive(x)?;
        let mut w = w0.to_vec();
        for _ in 0..self.depth {
            w = self.layer(&w, &drive);
        }
        Ok(w)
    }

    /// Output map `W_f φ(w) + Y_f x + b_f`.
    pub fn output(&self, w: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut u = linalg::vec_add(&self.y_f.mat_vec(x)?, &self.b_f);
        if self.n_c > 0 {
            u = linalg::vec_add(&u, &self.w_f.mat_vec(&relu(w))?);
        }
        Ok(u)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.hidden(x)?;
        self.output(&w, x)
    }
}

/// Static-weight network equivalent to `cfg.depth` unravelling steps.
pub fn export_explicit(net: &ImplicitNet, cfg: &UnravelConfig) -> Result<ExplicitNet> {
    cfg.validate(net.n_c)?;
    let i_minus_k = Matrix::identity(net.n_c).sub(&cfg.gain)?;
    Ok(ExplicitNet {
        n: net.n,
        m: net.m,
        horizon: net.horizon,
        n_c: net.n_c,
        depth: cfg.depth,
        skip: cfg.gain.clone(),
        act: i_minus_k.matmul(&net.w)?,
        input: i_minus_k.matmul(&net.y)?,
        bias: i_minus_k.mat_vec(&net.b)?,
        w_f: net.w_f.clone(),
        y_f: net.y_f.clone(),
        b_f: net.b_f.clone(),
        w0: cfg.initial(net.n_c),
    })
}

/// Runs the layer recursion at `x`, recording every iterate and residual.
pub fn unravel(net: &ImplicitNet, x: &[f64], cfg: &UnravelConfig) -> Result<UnravelTrace> {
    let explicit = export_explicit(net, cfg)?;
    let zeta = net.drive(x)?;
    let drive = explicit.layer_drive(x)?;

    let mut w = explicit.w0.clone();
    let mut iterates = Vec::with_capacity(cfg.depth + 1);
    let mut residuals = Vec::with_capacity(cfg.depth + 1);
    let mut converged_at = None;
    for j in 0..=cfg.depth {
        let r = net.residual_with_drive(&zeta, &w)?;
        residuals.push(r);
        if r <= cfg.tol && converged_at.is_none() {
            converged_at = Some(j);
        }
        if j == cfg.depth || (cfg.early_stop && converged_at.is_some()) {
            iterates.push(w);
            break;
        }
        let next = explicit.layer(&w, &drive);
        iterates.push(std::mem::replace(&mut w, next));
    }
    Ok(UnravelTrace {
        iterates,
        residuals,
        converged_at,
    })
}

/// Matrices `(K, (I - K) D)` of the error recursion.
pub fn error_dynamics_matrices(net: &ImplicitNet, gain: &Matrix) -> Result<(Matrix, Matrix)> {
    if gain.shape() != (net.n_c, net.n_c) {
        return Err(MpcError::DimensionMismatch(format!(
            "gain is {}x{}, hidden width is {}",
            gain.rows(),
            gain.cols(),
            net.n_c
        )));
    }
    let b_err = Matrix::identity(net.n_c).sub(gain)?.matmul(&net.w)?;
    Ok((gain.clone(), b_err))
}

/// `φ̃ᵀ T (e - φ̃)` with `e = w - y`, `φ̃ = φ(w) - φ(y)` and `T = diag(t)`.
pub fn sector_form(w: &[f64], y: &[f64], t: &[f64]) -> f64 {
    w.iter()
        .zip(y)
        .zip(t)
        .map(|((&wi, &yi), &ti)| {
            let e = wi - yi;
            let pt = wi.max(0.0) - yi.max(0.0);
            pt * ti * (e - pt)
        })
        .sum()
}

/// Smallest sector form over random hidden vectors around `y(x)` and random
/// positive diagonal multipliers. Should never be meaningfully negative.
pub fn sector_check(net: &ImplicitNet, x: &[f64], samples: usize, seed: u64) -> Result<f64> {
    let y = solve_via_lcp(net, x)?.y;
    let scale = 1.0 + linalg::norm_inf(&y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let w: Vec<f64> = y
            .iter()
            .map(|&yi| yi + rng.random_range(-2.0..2.0) * scale)
            .collect();
        let t: Vec<f64> = (0..y.len()).map(|_| rng.random_range(1e-3..10.0)).collect();
        worst = worst.min(sector_form(&w, &y, &t));
    }
    Ok(worst)
}
