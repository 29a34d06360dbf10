//! Saturation-aware stochastic MPC (SA-SMPC).
//!
//! Offline synthesis of contraction certificates and probabilistic reachable
//! sets for saturated linear systems under unbounded disturbances, plus the
//! online constraint-tightened controller and a Monte Carlo closed-loop
//! validation harness.
//!
//! The pipeline is:
//! 1. [`model`] — plant description and the nominal/error split dynamics,
//! 2. [`conic`] — dense SDP feasibility oracle and convex QP solver,
//! 3. [`offline`] — contraction certificate synthesis via two-level bisection,
//! 4. [`prs`] — probabilistic reachable sets and the effective contraction rate,
//! 5. [`tightening`] — tightened polytopes, terminal pair and terminal set,
//! 6. [`controller`] — the online MPC loop with interpolated initialization,
//! 7. [`sim`] — closed-loop Monte Carlo rollouts, reports, and plots.

pub mod conic;
pub mod controller;
pub mod error;
pub mod model;
pub mod offline;
pub mod presets;
pub mod prs;
pub mod sim;
pub mod tightening;

pub use error::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
