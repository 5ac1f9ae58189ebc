//! Truncated BBGKY hierarchy for few-boson reduced density matrices in a
//! two-site Bose-Hubbard model, with an exact reference solver,
//! representability diagnostics and two positivity-restoring corrections.

pub mod bbgky;
pub mod cli;
pub mod cluster;
pub mod corrections;
pub mod diagnostics;
pub mod dimer_exact;
pub mod error;
pub mod integrator;
pub mod repres;
pub mod sampling;
pub mod symspace;

pub use error::{Error, Result};
