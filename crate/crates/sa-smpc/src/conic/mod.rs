//! Self-contained small-scale dense solvers behind backend-agnostic contracts:
//! an SDP feasibility oracle for the offline LMIs and a convex QP solver for
//! the online MPC problem.
//!
//! Every Feasible/Optimal answer is re-verified against the raw problem data,
//! independent of solver internals.

mod qp;
mod sdp;

pub use qp::{QpProblem, QpSolution, SolveStatus, SolveStatusKind, qp_solve};
pub use sdp::{AffineSymBlock, SdpFeasibilityProblem, SdpOutcome, sdp_feasible};
