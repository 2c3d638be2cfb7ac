//! Linear-quadratic MPC expressed as an implicit ReLU network.
//!
//! The pipeline is:
//!
//! * [`condense`] builds the condensed QP `min uᵀHu + 2xᵀFᵀu s.t. Gu ≤ S_u x + w`;
//! * [`lcp`] solves it through its KKT conditions as a linear complementarity
//!   problem, independently of any network;
//! * [`implicit`] writes down the equivalent implicit network
//!   `y = W relu(y) + Y x + b`, `u = W_f relu(y) + Y_f x`;
//! * [`unravel`] truncates the fixed-point iteration into a finite-depth
//!   feed-forward network;
//! * [`simulate`] runs any of these controllers in closed loop;
//! * [`pwa`] goes the other way, from piecewise-affine laws back to costs.

pub mod cli;
pub mod condense;
pub mod error;
pub mod example;
pub mod format;
pub mod implicit;
pub mod lcp;
pub mod linalg;
pub mod pwa;
pub mod simulate;
pub mod unravel;

pub use condense::{condense, first_input, rollout_cost, CondensedQp, CostConvention, LtiSystem, MpcProblem};
pub use error::{MpcError, Result};
pub use implicit::{build_implicit, ImplicitNet};
pub use linalg::Matrix;
