//! Horizon-N linear-quadratic MPC problem and its condensed QP
//!
//! ```text
//!   min_u  uᵀ H u + 2 xᵀ Fᵀ u      s.t.  G u ≤ S_u x + w
//! ```
//!
//! obtained by eliminating the predicted states with the LTI dynamics.

use crate::error::{MpcError, Result};
use crate::linalg::{self, cholesky, solve_spd, Matrix, SpdFactorization};

/// Tolerance for the PSD check on stage-state weights.
const PSD_TOL: f64 = 1e-9;
/// Tolerance for the PD check on input and terminal weights.
const PD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: Matrix,
    b: Matrix,
}

impl LtiSystem {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(MpcError::InvalidProblem(format!(
                "A must be square, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if b.rows() != a.rows() || b.cols() == 0 {
            return Err(MpcError::InvalidProblem(format!(
                "B is {}x{}, expected {} rows and at least one column",
                b.rows(),
                b.cols(),
                a.rows()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.cols()
    }

    /// One step of `x⁺ = A x + B u`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::vec_add(&self.a.mat_vec(x)?, &self.b.mat_vec(u)?))
    }
}

/// Which stage inputs carry an `uᵀ R u` penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostConvention {
    /// Every input `u[k] … u[k+N-1]` is penalized.
    #[default]
    Standard,
    /// Only `u[k+1] … u[k+N-1]` are penalized; `u[k]` carries no input cost.
    PaperLiteral,
}

impl std::str::FromStr for CostConvention {
    type Err = MpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "paper-literal" | "literal" => Ok(Self::PaperLiteral),
            other => Err(MpcError::InvalidProblem(format!(
                "unknown cost convention `{other}` (expected `standard` or `paper-literal`)"
            ))),
        }
    }
}

impl std::fmt::Display for CostConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::PaperLiteral => "paper-literal",
        })
    }
}

/// Polytopic constraint `G u ≤ S_u x + w` on the stacked input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct InputConstraints {
    pub g: Matrix,
    pub s_u: Matrix,
    pub w: Vec<f64>,
}

impl InputConstraints {
    pub fn none(n: usize, horizon_inputs: usize) -> Self {
        Self {
            g: Matrix::zeros(0, horizon_inputs),
            s_u: Matrix::zeros(0, n),
            w: Vec::new(),
        }
    }

    /// Box bounds `lo ≤ u ≤ hi` on every input over the horizon, encoded as
    /// `I ⊗ [1/hi, -1/|lo|]ᵀ` with `w = 1` and `S_u = 0`.
    pub fn input_bounds(lo: f64, hi: f64, n: usize, horizon_inputs: usize) -> Result<Self> {
        if !(hi > 0.0 && lo < 0.0 && hi.is_finite() && lo.is_finite()) {
            return Err(MpcError::InvalidProblem(format!(
                "input_bounds need lo < 0 < hi, got lo={lo} hi={hi}"
            )));
        }
        let pair = Matrix::column(&[1.0 / hi, -1.0 / lo.abs()]);
        let g = linalg::kron(&Matrix::identity(horizon_inputs), &pair);
        let nc = g.rows();
        Ok(Self {
            g,
            s_u: Matrix::zeros(nc, n),
            w: vec![1.0; nc],
        })
    }

    pub fn count(&self) -> usize {
        self.g.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    sys: LtiSystem,
    horizon: usize,
    /// Stage-state weights for x[k+1] … x[k+N-1]; one entry is broadcast.
    q: Vec<Matrix>,
    /// Stage-input weights for u[k] … u[k+N-1]; one entry is broadcast.
    r: Vec<Matrix>,
    p: Matrix,
    constraints: InputConstraints,
    convention: CostConvention,
}

impl MpcProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sys: LtiSystem,
        horizon: usize,
        q: Vec<Matrix>,
        r: Vec<Matrix>,
        p: Matrix,
        constraints: InputConstraints,
        convention: CostConvention,
    ) -> Result<Self> {
        let n = sys.state_dim();
        let m = sys.input_dim();
        if horizon == 0 {
            return Err(MpcError::InvalidProblem("horizon N must be at least 1".into()));
        }
        let q_expected = horizon.saturating_sub(1).max(1);
        if !(q.len() == 1 || q.len() == q_expected) {
            return Err(MpcError::InvalidProblem(format!(
                "expected 1 or {q_expected} stage-state weights, got {}",
                q.len()
            )));
        }
        if !(r.len() == 1 || r.len() == horizon) {
            return Err(MpcError::InvalidProblem(format!(
                "expected 1 or {horizon} stage-input weights, got {}",
                r.len()
            )));
        }
        for (i, qi) in q.iter().enumerate() {
            check_weight(&format!("Q[{i}]"), qi, n, -PSD_TOL)?;
        }
        for (i, ri) in r.iter().enumerate() {
            check_weight(&format!("R[{i}]"), ri, m, PD_TOL)?;
        }
        check_weight("P", &p, n, PD_TOL)?;

        let nc = constraints.count();
        if constraints.g.cols() != horizon * m {
            return Err(MpcError::InvalidProblem(format!(
                "G has {} columns, expected N*m = {}",
                constraints.g.cols(),
                horizon * m
            )));
        }
        if constraints.s_u.shape() != (nc, n) {
            return Err(MpcError::InvalidProblem(format!(
                "S_u is {}x{}, expected {nc}x{n}",
                constraints.s_u.rows(),
                constraints.s_u.cols()
            )));
        }
        if constraints.w.len() != nc || constraints.w.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::InvalidProblem(format!(
                "w must hold {nc} finite entries"
            )));
        }
        Ok(Self {
            sys,
            horizon,
            q,
            r,
            p,
            constraints,
            convention,
        })
    }

    pub fn sys(&self) -> &LtiSystem {
        &self.sys
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn constraints(&self) -> &InputConstraints {
        &self.constraints
    }

    pub fn convention(&self) -> CostConvention {
        self.convention
    }

    pub fn terminal_weight(&self) -> &Matrix {
        &self.p
    }

    /// Stage-state weights as given (one entry means broadcast).
    pub fn state_weights(&self) -> &[Matrix] {
        &self.q
    }

    /// Stage-input weights as given (one entry means broadcast).
    pub fn input_weights(&self) -> &[Matrix] {
        &self.r
    }

    /// Weight on predicted state x[k+i], i = 1 … N-1.
    pub fn stage_state_weight(&self, i: usize) -> &Matrix {
        debug_assert!(i >= 1 && i < self.horizon);
        if self.q.len() == 1 {
            &self.q[0]
        } else {
            &self.q[i - 1]
        }
    }

    /// Weight on input u[k+i] for i = 0 … N-1, or `None` when the convention
    /// leaves it unpenalized.
    pub fn stage_input_weight(&self, i: usize) -> Option<&Matrix> {
        if i == 0 && self.convention == CostConvention::PaperLiteral {
            return None;
        }
        Some(if self.r.len() == 1 { &self.r[0] } else { &self.r[i] })
    }

    /// Same problem with a different input-cost convention.
    pub fn with_convention(&self, convention: CostConvention) -> Self {
        Self {
            convention,
            ..self.clone()
        }
    }
}

fn check_weight(name: &str, w: &Matrix, dim: usize, min_eig: f64) -> Result<()> {
    if w.shape() != (dim, dim) {
        return Err(MpcError::InvalidProblem(format!(
            "{name} is {}x{}, expected {dim}x{dim}",
            w.rows(),
            w.cols()
        )));
    }
    if w.max_asymmetry() > linalg::SYMMETRY_TOL * (1.0 + w.max_abs()) {
        return Err(MpcError::InvalidProblem(format!("{name} is not symmetric")));
    }
    let lo = linalg::min_eigenvalue(w)?;
    if lo < min_eig {
        return Err(MpcError::InvalidProblem(format!(
            "{name} has minimum eigenvalue {lo:e}, below {min_eig:e}"
        )));
    }
    Ok(())
}

/// The condensed MPC-QP together with the prediction matrices it was built
/// from and a cached factorization of its Hessian.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// (N·m)×(N·m)
    pub h: Matrix,
    /// (N·m)×n, so the linear term is `2 (F x)ᵀ u`.
    pub f: Matrix,
    pub g: Matrix,
    pub s_u: Matrix,
    pub w: Vec<f64>,
    /// `S_u + G H⁻¹ F`.
    pub s: Matrix,
    /// Stacked `Aⁱ`, i = 1 … N, (N·n)×n.
    pub phi_pred: Matrix,
    /// Block lower-triangular input-to-state map; block row i-1 is B̃ᵢ.
    pub gamma_pred: Matrix,
    factor: SpdFactorization,
}

impl CondensedQp {
    pub fn factor(&self) -> &SpdFactorization {
        &self.factor
    }

    pub fn n_constraints(&self) -> usize {
        self.g.rows()
    }

    pub fn n_inputs(&self) -> usize {
        self.horizon * self.m
    }

    /// `H⁻¹ B`.
    pub fn h_solve(&self, b: &Matrix) -> Result<Matrix> {
        Ok(solve_spd(&self.factor, b)?)
    }

    /// `G H⁻¹ Gᵀ`, symmetrized.
    pub fn lcp_matrix(&self) -> Result<Matrix> {
        let hig = self.h_solve(&self.g.transpose())?;
        Ok(self.g.matmul(&hig)?.symmetrize()?)
    }

    /// LCP offset `S x + w`.
    pub fn lcp_offset(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::vec_add(&self.s.mat_vec(x)?, &self.w))
    }

    /// Unconstrained minimizer `-H⁻¹ F x`.
    pub fn unconstrained(&self, x: &[f64]) -> Result<Vec<f64>> {
        let fx = self.f.mat_vec(x)?;
        Ok(linalg::vec_scale(&self.factor.solve_vec(&fx)?, -1.0))
    }

    /// QP objective `uᵀ H u + 2 xᵀ Fᵀ u`.
    pub fn objective(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        let hu = self.h.mat_vec(u)?;
        let fx = self.f.mat_vec(x)?;
        Ok(linalg::dot(u, &hu) + 2.0 * linalg::dot(&fx, u))
    }

    /// Slack of `G u ≤ S_u x + w`, i.e. `S_u x + w - G u`.
    pub fn constraint_slack(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let rhs = linalg::vec_add(&self.s_u.mat_vec(x)?, &self.w);
        Ok(linalg::vec_sub(&rhs, &self.g.mat_vec(u)?))
    }

    /// Largest violation of `G u ≤ S_u x + w` (zero when feasible).
    pub fn constraint_violation(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        Ok(self
            .constraint_slack(x, u)?
            .iter()
            .fold(0.0f64, |m, s| m.max(-s)))
    }
}

/// Prediction matrices: `x[k+i] = Aⁱ x + B̃ᵢ u` for i = 1 … N.
fn prediction_matrices(sys: &LtiSystem, horizon: usize) -> Result<(Matrix, Matrix)> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let mut phi = Matrix::zeros(horizon * n, n);
    let mut gamma = Matrix::zeros(horizon * n, horizon * m);

    // powers[i] = Aⁱ, i = 0 … N
    let mut powers = vec![Matrix::identity(n)];
    for i in 1..=horizon {
        powers.push(powers[i - 1].matmul(sys.a())?);
    }
    let ab: Vec<Matrix> = powers
        .iter()
        .map(|p| p.matmul(sys.b()))
        .collect::<std::result::Result<_, _>>()?;

    for i in 1..=horizon {
        phi.set_block((i - 1) * n, 0, &powers[i]);
        for j in 0..i {
            gamma.set_block((i - 1) * n, j * m, &ab[i - 1 - j]);
        }
    }
    Ok((phi, gamma))
}

/// Eliminates the predicted states and returns the condensed QP.
pub fn condense(p: &MpcProblem) -> Result<CondensedQp> {
    let n = p.sys.state_dim();
    let m = p.sys.input_dim();
    let horizon = p.horizon;
    let (phi, gamma) = prediction_matrices(&p.sys, horizon)?;

    let mut q_bar = Matrix::zeros(horizon * n, horizon * n);
    for i in 1..horizon {
        q_bar.set_block((i - 1) * n, (i - 1) * n, p.stage_state_weight(i));
    }
    q_bar.set_block((horizon - 1) * n, (horizon - 1) * n, &p.p);

    let mut r_bar = Matrix::zeros(horizon * m, horizon * m);
    for i in 0..horizon {
        if let Some(ri) = p.stage_input_weight(i) {
            r_bar.set_block(i * m, i * m, ri);
        }
    }

    let qg = q_bar.matmul(&gamma)?;
    let h = gamma.transpose().matmul(&qg)?.add(&r_bar)?.symmetrize()?;
    let f = qg.transpose().matmul(&phi)?;
    let factor = cholesky(&h)?;

    let c = &p.constraints;
    let s = if c.count() == 0 {
        Matrix::zeros(0, n)
    } else {
        let hif = solve_spd(&factor, &f)?;
        c.s_u.add(&c.g.matmul(&hif)?)?
    };

    Ok(CondensedQp {
        n,
        m,
        horizon,
        h,
        f,
        g: c.g.clone(),
        s_u: c.s_u.clone(),
        w: c.w.clone(),
        s,
        phi_pred: phi,
        gamma_pred: gamma,
        factor,
    })
}

/// First `m` entries of a stacked input sequence.
pub fn first_input(useq: &[f64], m: usize) -> Result<Vec<f64>> {
    if m == 0 || useq.len() % m != 0 || useq.is_empty() {
        return Err(MpcError::DimensionMismatch(format!(
            "input sequence of length {} is not a positive multiple of m = {m}",
            useq.len()
        )));
    }
    Ok(useq[..m].to_vec())
}

/// Cost of the horizon-N problem by direct simulation of the dynamics.
pub fn rollout_cost(p: &MpcProblem, x: &[f64], useq: &[f64]) -> Result<f64> {
    let n = p.sys.state_dim();
    let m = p.sys.input_dim();
    if x.len() != n || useq.len() != p.horizon * m {
        return Err(MpcError::DimensionMismatch(format!(
            "rollout with state length {} and input length {}, expected {n} and {}",
            x.len(),
            useq.len(),
            p.horizon * m
        )));
    }
    let quad = |w: &Matrix, v: &[f64]| -> Result<f64> { Ok(linalg::dot(v, &w.mat_vec(v)?)) };

    let mut cost = 0.0;
    let mut state = x.to_vec();
    for i in 0..p.horizon {
        let u = &useq[i * m..(i + 1) * m];
        if let Some(ri) = p.stage_input_weight(i) {
            cost += quad(ri, u)?;
        }
        state = p.sys.step(&state, u)?;
        if i + 1 < p.horizon {
            cost += quad(p.stage_state_weight(i + 1), &state)?;
        }
    }
    cost += quad(&p.p, &state)?;
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::paper_example;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_problem(a: f64, b: f64, horizon: usize, convention: CostConvention) -> MpcProblem {
        let one = Matrix::identity(1);
        MpcProblem::new(
            LtiSystem::new(Matrix::from_diag(&[a]), Matrix::from_diag(&[b])).unwrap(),
            horizon,
            vec![one.clone()],
            vec![one.clone()],
            one,
            InputConstraints::none(1, horizon),
            convention,
        )
        .unwrap()
    }

    #[test]
    fn zero_input_matrix_gives_block_diagonal_r() {
        let sys = LtiSystem::new(
            Matrix::from_rows(&[[0.5, 0.1], [0.0, 0.9]]).unwrap(),
            Matrix::zeros(2, 1),
        )
        .unwrap();
        let r: Vec<Matrix> = (1..=3).map(|i| Matrix::from_diag(&[i as f64])).collect();
        let p = MpcProblem::new(
            sys,
            3,
            vec![Matrix::identity(2)],
            r,
            Matrix::identity(2),
            InputConstraints::none(2, 3),
            CostConvention::Standard,
        )
        .unwrap();
        let qp = condense(&p).unwrap();
        assert_eq!(qp.f.max_abs(), 0.0);
        assert_eq!(qp.h, Matrix::from_diag(&[1.0, 2.0, 3.0]));
    }

    #[test]
    fn scalar_two_step_matches_hand_expansion() {
        // x1 = x + u0, x2 = x + u0 + u1
        // J = u0² + u1² + x1² + x2²
        //   = 3u0² + 2u1² + 2u0u1 + 2x(2u0 + u1) + 2x²
        let qp = condense(&scalar_problem(1.0, 1.0, 2, CostConvention::Standard)).unwrap();
        assert_eq!(qp.h, Matrix::from_rows(&[[3.0, 1.0], [1.0, 2.0]]).unwrap());
        assert_eq!(qp.f, Matrix::column(&[2.0, 1.0]));

        // paper-literal drops u0²
        let qp = condense(&scalar_problem(1.0, 1.0, 2, CostConvention::PaperLiteral)).unwrap();
        assert_eq!(qp.h, Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap());
    }

    #[test]
    fn paper_literal_single_step_is_degenerate() {
        let p = scalar_problem(1.0, 0.0, 1, CostConvention::PaperLiteral);
        assert!(matches!(
            condense(&p),
            Err(MpcError::Linalg(crate::linalg::LinalgError::NotPositiveDefinite { .. }))
        ));
    }

    #[test]
    fn prediction_blocks_match_btilde() {
        let p = paper_example();
        let qp = condense(&p).unwrap();
        let (n, m) = (2, 1);
        let a = p.sys().a();
        let b = p.sys().b();
        for i in 1..=p.horizon() {
            for j in 0..p.horizon() {
                let block = qp.gamma_pred.block((i - 1) * n, j * m, n, m);
                let expected = if j < i {
                    let mut pw = Matrix::identity(n);
                    for _ in 0..(i - 1 - j) {
                        pw = pw.matmul(a).unwrap();
                    }
                    pw.matmul(b).unwrap()
                } else {
                    Matrix::zeros(n, m)
                };
                assert!(block.sub(&expected).unwrap().max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_form_equivalence_on_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for convention in [CostConvention::Standard, CostConvention::PaperLiteral] {
            let p = paper_example().with_convention(convention);
            let qp = condense(&p).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-300.0..300.0)).collect();
                let u: Vec<f64> = (0..10).map(|_| rng.random_range(-20.0..20.0)).collect();
                let cost = rollout_cost(&p, &x, &u).unwrap();
                let c0 = rollout_cost(&p, &x, &[0.0; 10]).unwrap();
                let form = qp.objective(&x, &u).unwrap() + c0;
                assert!((cost - form).abs() <= 1e-7 * (1.0 + cost.abs()));
            }
        }
    }

    #[test]
    fn hessian_dominates_input_weights_and_s_is_consistent() {
        let p = paper_example();
        let qp = condense(&p).unwrap();
        let min_h = linalg::min_eigenvalue(&qp.h).unwrap();
        assert!(min_h >= 1.0 - 1e-9);
        let hif = qp.h_solve(&qp.f).unwrap();
        let s = qp.s_u.add(&qp.g.matmul(&hif).unwrap()).unwrap();
        assert!(s.sub(&qp.s).unwrap().norm_inf() <= 1e-9);
        assert_eq!(qp.h.shape(), (10, 10));
        assert_eq!(qp.n_constraints(), 20);
    }

    #[test]
    fn first_input_selection() {
        assert_eq!(first_input(&[5.0, 1.0, 2.0], 1).unwrap(), vec![5.0]);
        assert_eq!(first_input(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![1.0, 2.0]);
        assert_eq!(first_input(&[1.0, 2.0], 2).unwrap(), vec![1.0, 2.0]);
        assert!(first_input(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn rollout_cost_cases() {
        let p = paper_example();
        assert_eq!(rollout_cost(&p, &[0.0, 0.0], &[0.0; 10]).unwrap(), 0.0);

        // one step: (Ax+Bu)ᵀP(Ax+Bu) + uᵀRu
        let s = scalar_problem(2.0, 3.0, 1, CostConvention::Standard);
        let c = rollout_cost(&s, &[1.5], &[-0.5]).unwrap();
        let x1: f64 = 2.0 * 1.5 + 3.0 * -0.5;
        assert!((c - (x1 * x1 + 0.25)).abs() < 1e-15);

        // zero input from x = [1, 0]: Σ xᵢᵀ Q xᵢ + x_Nᵀ P x_N along the free response
        let mut x = vec![1.0, 0.0];
        let mut expected = 0.0;
        for i in 1..=10 {
            x = p.sys().step(&x, &[0.0]).unwrap();
            let w = if i < 10 { p.stage_state_weight(i) } else { p.terminal_weight() };
            expected += linalg::dot(&x, &w.mat_vec(&x).unwrap());
        }
        let c = rollout_cost(&p, &[1.0, 0.0], &[0.0; 10]).unwrap();
        assert!((c - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn input_bounds_encoding() {
        let c = InputConstraints::input_bounds(-10.0, 10.0, 2, 10).unwrap();
        let g = linalg::kron(&Matrix::identity(10), &Matrix::column(&[0.1, -0.1]));
        assert_eq!(c.g, g);
        assert_eq!(c.w, vec![1.0; 20]);
        assert_eq!(c.s_u, Matrix::zeros(20, 2));
        assert!(InputConstraints::input_bounds(1.0, 10.0, 2, 10).is_err());
    }

    #[test]
    fn invalid_weights_rejected() {
        let one = Matrix::identity(1);
        let sys = LtiSystem::new(one.clone(), one.clone()).unwrap();
        let err = MpcProblem::new(
            sys.clone(),
            2,
            vec![Matrix::from_diag(&[-1.0])],
            vec![one.clone()],
            one.clone(),
            InputConstraints::none(1, 2),
            CostConvention::Standard,
        );
        assert!(err.is_err());
        let err = MpcProblem::new(
            sys,
            2,
            vec![one.clone()],
            vec![Matrix::from_diag(&[0.0])],
            one,
            InputConstraints::none(1, 2),
            CostConvention::Standard,
        );
        assert!(err.is_err());
    }
}
