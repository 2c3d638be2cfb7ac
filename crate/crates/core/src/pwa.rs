//! Piecewise-affine view of the controller and recovery of MPC costs from it.
//!
//! Regions are discovered from samples: every sample is solved by the oracle,
//! its active set read off the multipliers, and samples with equal active
//! sets are grouped under one affine law.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::condense::{first_input, CondensedQp, LtiSystem};
use crate::error::{MpcError, Result};
use crate::lcp::solve_qp_via_kkt;
use crate::linalg::{self, cholesky, solve_spd, Matrix};

/// Multipliers above this count as active.
pub const ACTIVE_TOL: f64 = 1e-9;
/// Region laws must reproduce the oracle on every witness to this accuracy.
pub const WITNESS_TOL: f64 = 1e-7;
/// `‖E‖∞` at or below this marks a saturated (pure offset) region.
pub const SATURATION_TOL: f64 = 1e-9;
/// Eigenvalue slack for the candidate sign checks.
pub const CANDIDATE_EIG_SLACK: f64 = 1e-9;
/// Closed loops with spectral radius at or above `1 - STABILITY_MARGIN` are rejected.
pub const STABILITY_MARGIN: f64 = 1e-9;
pub const DEFAULT_MARGIN: f64 = 1e-6;
pub const DEFAULT_PARAM_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq)]
pub struct PwaRegion {
    /// Sorted indices of the active constraints.
    pub active_set: Vec<usize>,
    /// Applied-input gain, m×n.
    pub e: Matrix,
    pub omega: Vec<f64>,
    /// Full-sequence law; absent for regions read back from a report.
    pub e_full: Option<Matrix>,
    pub omega_full: Option<Vec<f64>>,
    pub witnesses: Vec<Vec<f64>>,
    pub witness_count: usize,
    pub saturated: bool,
}

impl PwaRegion {
    pub fn from_law(active_set: Vec<usize>, e: Matrix, omega: Vec<f64>) -> Self {
        let saturated = e.norm_inf() <= SATURATION_TOL;
        Self {
            active_set,
            e,
            omega,
            e_full: None,
            omega_full: None,
            witnesses: Vec::new(),
            witness_count: 0,
            saturated,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::vec_add(&self.e.mat_vec(x)?, &self.omega))
    }

    /// Closed-loop matrix `A + B E`.
    pub fn closed_loop(&self, sys: &LtiSystem) -> Result<Matrix> {
        Ok(sys.a().add(&sys.b().matmul(&self.e)?)?)
    }
}

/// Affine law of the equality-constrained QP with `σ` tight:
/// `u(x) = E_full x + ω_full`.
pub fn region_law(qp: &CondensedQp, active_set: &[usize]) -> Result<(Matrix, Vec<f64>)> {
    let free = qp.h_solve(&qp.f)?.neg();
    if active_set.is_empty() {
        return Ok((free, vec![0.0; qp.n_inputs()]));
    }
    if active_set.iter().any(|&i| i >= qp.n_constraints()) {
        return Err(MpcError::DimensionMismatch(format!(
            "active set {active_set:?} exceeds {} constraints",
            qp.n_constraints()
        )));
    }
    let g_s = qp.g.select_rows(active_set);
    let hinv_gt = qp.h_solve(&g_s.transpose())?;
    let m_ss = g_s.matmul(&hinv_gt)?.symmetrize()?;
    let chol = cholesky(&m_ss).map_err(|_| MpcError::SingularActiveSet(active_set.to_vec()))?;
    let s_s = qp.s.select_rows(active_set);
    let w_s: Vec<f64> = active_set.iter().map(|&i| qp.w[i]).collect();
    let e_full = free.add(&hinv_gt.matmul(&solve_spd(&chol, &s_s)?)?)?;
    let omega_full = hinv_gt.mat_vec(&chol.solve_vec(&w_s)?)?;
    Ok((e_full, omega_full))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PwaExtraction {
    /// Regions in order of first appearance among the samples.
    pub regions: Vec<PwaRegion>,
    /// Samples that could not be attributed, with the reason.
    pub skipped: Vec<(usize, String)>,
}

impl PwaExtraction {
    pub fn unsaturated(&self) -> impl Iterator<Item = (usize, &PwaRegion)> {
        self.regions.iter().enumerate().filter(|(_, r)| !r.saturated)
    }
}

pub fn extract_pwa(qp: &CondensedQp, samples: &[Vec<f64>]) -> Result<PwaExtraction> {
    for (i, x) in samples.iter().enumerate() {
        if x.len() != qp.n {
            return Err(MpcError::DimensionMismatch(format!(
                "sample {i} has length {}, expected {}",
                x.len(),
                qp.n
            )));
        }
    }
    let solved: Vec<Result<(Vec<usize>, Vec<f64>)>> = samples
        .par_iter()
        .map(|x| {
            let sol = solve_qp_via_kkt(qp, x)?;
            let sigma = (0..sol.lambda.len()).filter(|&i| sol.lambda[i] > ACTIVE_TOL).collect();
            Ok((sigma, first_input(&sol.u, qp.m)?))
        })
        .collect();

    let mut regions: Vec<PwaRegion> = Vec::new();
    let mut index: HashMap<Vec<usize>, Option<usize>> = HashMap::new();
    let mut skipped = Vec::new();
    for (k, (x, res)) in samples.iter().zip(solved).enumerate() {
        let (sigma, u) = match res {
            Ok(v) => v,
            Err(e) => {
                skipped.push((k, e.to_string()));
                continue;
            }
        };
        let slot = match index.get(&sigma) {
            Some(slot) => *slot,
            None => {
                let slot = match region_law(qp, &sigma) {
                    Ok((e_full, omega_full)) => {
                        let mut r = PwaRegion::from_law(
                            sigma.clone(),
                            e_full.block(0, 0, qp.m, qp.n),
                            omega_full[..qp.m].to_vec(),
                        );
                        r.e_full = Some(e_full);
                        r.omega_full = Some(omega_full);
                        regions.push(r);
                        Some(regions.len() - 1)
                    }
                    Err(e) => {
                        skipped.push((k, e.to_string()));
                        None
                    }
                };
                index.insert(sigma, slot);
                if slot.is_none() {
                    continue;
                }
                slot
            }
        };
        let Some(slot) = slot else {
            skipped.push((k, "active set has no valid law".into()));
            continue;
        };
        let region = &mut regions[slot];
        let law = region.apply(x)?;
        let err = linalg::norm_inf(&linalg::vec_sub(&law, &u));
        if err > WITNESS_TOL * (1.0 + linalg::norm_inf(&u)) {
            skipped.push((k, format!("region law misses the oracle by {err:e}")));
            continue;
        }
        if !region.witnesses.contains(x) {
            region.witnesses.push(x.clone());
            region.witness_count += 1;
        }
    }
    // a region whose only witnesses were rejected is not a region
    regions.retain(|r| r.witness_count > 0);
    Ok(PwaExtraction { regions, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostCandidate {
    pub q: Matrix,
    pub r: Matrix,
    /// One matrix per unsaturated region, in region order.
    pub p: Vec<Matrix>,
}

impl CostCandidate {
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        let sym = |name: &str, a: &Matrix, dim: usize| -> Result<()> {
            if a.shape() != (dim, dim) {
                return Err(MpcError::DimensionMismatch(format!("{name} must be {dim}x{dim}")));
            }
            if a.max_asymmetry() > linalg::SYMMETRY_TOL * (1.0 + a.max_abs()) {
                return Err(MpcError::InvalidProblem(format!("{name} is not symmetric")));
            }
            Ok(())
        };
        sym("Q", &self.q, n)?;
        sym("R", &self.r, m)?;
        if linalg::min_eigenvalue(&self.q)? < -CANDIDATE_EIG_SLACK {
            return Err(MpcError::InvalidProblem("Q is not positive semidefinite".into()));
        }
        if linalg::min_eigenvalue(&self.r)? <= CANDIDATE_EIG_SLACK {
            return Err(MpcError::InvalidProblem("R is not positive definite".into()));
        }
        for (i, p) in self.p.iter().enumerate() {
            sym("P", p, n)?;
            if linalg::min_eigenvalue(p)? <= CANDIDATE_EIG_SLACK {
                return Err(MpcError::InvalidProblem(format!("P[{i}] is not positive definite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionVerdict {
    /// Index into the full region list.
    pub region_id: usize,
    pub max_eig: f64,
    pub holds: bool,
}

/// Checks `ΦᵢᵀPᵢΦᵢ − Pᵢ + Q + EᵢᵀREᵢ ≺ −margin·I` on every unsaturated region.
pub fn verify_cost_lmi(
    sys: &LtiSystem,
    regions: &[PwaRegion],
    cand: &CostCandidate,
    margin: f64,
) -> Result<Vec<RegionVerdict>> {
    cand.validate(sys.state_dim(), sys.input_dim())?;
    let active: Vec<(usize, &PwaRegion)> =
        regions.iter().enumerate().filter(|(_, r)| !r.saturated).collect();
    if active.len() != cand.p.len() {
        return Err(MpcError::DimensionMismatch(format!(
            "{} unsaturated regions but {} P matrices",
            active.len(),
            cand.p.len()
        )));
    }
    active
        .iter()
        .zip(&cand.p)
        .map(|(&(id, region), p)| {
            let phi = region.closed_loop(sys)?;
            let m = phi
                .transpose()
                .matmul(&p.matmul(&phi)?)?
                .sub(p)?
                .add(&cand.q)?
                .add(&region.e.transpose().matmul(&cand.r.matmul(&region.e)?)?)?
                .symmetrize()?;
            let max_eig = linalg::max_eigenvalue(&m)?;
            Ok(RegionVerdict { region_id: id, max_eig, holds: max_eig < -margin })
        })
        .collect()
}

/// Solves `ΦᵀPΦ − P = −rhs` by doubling the series `Σ (Φᵀ)ᵏ rhs Φᵏ`.
pub fn lyapunov_solve(phi: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if !phi.is_square() || rhs.shape() != phi.shape() {
        return Err(MpcError::DimensionMismatch("Lyapunov data must be square and equal".into()));
    }
    let rho = linalg::spectral_radius(phi)?;
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(MpcError::UnstableRegion { region: 0, radius: rho });
    }
    let mut a = phi.clone();
    let mut p = rhs.clone();
    for _ in 0..64 {
        if a.max_abs() < 1e-300 {
            break;
        }
        let next = p.add(&a.transpose().matmul(&p.matmul(&a)?)?)?;
        let step = next.sub(&p)?.max_abs();
        p = next;
        a = a.matmul(&a)?;
        if step <= f64::EPSILON * p.max_abs() {
            break;
        }
    }
    Ok(p.symmetrize()?)
}

/// Relative residual of `ΦᵀPΦ − P + rhs = 0`.
pub fn lyapunov_residual(phi: &Matrix, p: &Matrix, rhs: &Matrix) -> Result<f64> {
    let r = phi.transpose().matmul(&p.matmul(phi)?)?.sub(p)?.add(rhs)?;
    Ok(r.max_abs() / (1.0 + p.max_abs()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSearch {
    pub q: f64,
    pub r: f64,
    pub candidate: CostCandidate,
    pub verdicts: Vec<RegionVerdict>,
}

/// Naive synthesis: `Q = q I`, `R = r I` over the grid (q outer), each `Pᵢ`
/// from a Lyapunov equation with slack `2·margin·I`. Returns the first pass.
pub fn search_cost(
    sys: &LtiSystem,
    regions: &[PwaRegion],
    q_grid: &[f64],
    r_grid: &[f64],
    margin: f64,
) -> Result<CostSearch> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let active: Vec<(usize, &PwaRegion)> =
        regions.iter().enumerate().filter(|(_, r)| !r.saturated).collect();
    if active.is_empty() {
        return Err(MpcError::NotFound("every region is saturated".into()));
    }
    let mut loops = Vec::with_capacity(active.len());
    for &(id, region) in &active {
        let phi = region.closed_loop(sys)?;
        let radius = linalg::spectral_radius(&phi)?;
        if radius >= 1.0 - STABILITY_MARGIN {
            return Err(MpcError::UnstableRegion { region: id, radius });
        }
        loops.push(phi);
    }
    for &q in q_grid {
        for &r in r_grid {
            if q < 0.0 || r <= 0.0 {
                continue;
            }
            let qm = Matrix::identity(n).scale(q);
            let rm = Matrix::identity(m).scale(r);
            let mut ps = Vec::with_capacity(active.len());
            for (&(_, region), phi) in active.iter().zip(&loops) {
                let rhs = qm
                    .add(&region.e.transpose().matmul(&rm.matmul(&region.e)?)?)?
                    .add(&Matrix::identity(n).scale(2.0 * margin))?;
                ps.push(lyapunov_solve(phi, &rhs)?);
            }
            let candidate = CostCandidate { q: qm, r: rm, p: ps };
            if candidate.validate(n, m).is_err() {
                continue;
            }
            let verdicts = verify_cost_lmi(sys, regions, &candidate, margin)?;
            if verdicts.iter().all(|v| v.holds) {
                return Ok(CostSearch { q, r, candidate, verdicts });
            }
        }
    }
    Err(MpcError::NotFound(format!(
        "none of the {}x{} grid points passes",
        q_grid.len(),
        r_grid.len()
    )))
}
