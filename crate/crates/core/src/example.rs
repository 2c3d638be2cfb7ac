//! The two-state benchmark used throughout the tests and the CLI docs.

use crate::condense::{CostConvention, InputConstraints, LtiSystem, MpcProblem};
use crate::linalg::Matrix;

pub const HORIZON: usize = 10;
pub const INPUT_BOUND: f64 = 10.0;

/// Unstable second-order plant, N = 10, |u| ≤ 10.
pub fn paper_example() -> MpcProblem {
    let a = Matrix::from_rows(&[[4.0 / 3.0, -2.0 / 3.0], [1.0, 0.0]]).unwrap();
    let b = Matrix::column(&[0.0, 1.0]);
    let p = Matrix::from_rows(&[[7.1667, -4.2222], [-4.2222, 4.6852]]).unwrap();
    let q = Matrix::from_rows(&[[1.0, -2.0 / 3.0], [-2.0 / 3.0, 1.5]]).unwrap();
    let r = Matrix::identity(1);
    MpcProblem::new(
        LtiSystem::new(a, b).unwrap(),
        HORIZON,
        vec![q],
        vec![r],
        p,
        InputConstraints::input_bounds(-INPUT_BOUND, INPUT_BOUND, 2, HORIZON).unwrap(),
        CostConvention::Standard,
    )
    .unwrap()
}
