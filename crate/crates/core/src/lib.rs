//! Certified numerics for the Derrida–Retaux max-type recursive model.
//!
//! The crate iterates `X_{n+1} = (X_{n,1} + ... + X_{n,nu} - 1)^+` exactly on
//! lattice laws, brackets the free energy, certifies sub/supercriticality,
//! runs the generating-function upper-bound pipeline, and checks the
//! tree/spine identities by Monte Carlo.

// negated comparisons reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod conv;
pub mod criticality;
pub mod engine;
pub mod error;
pub mod exact;
pub mod experiments;
pub mod gf_bounds;
pub mod model;
pub mod offspring;
pub mod pmf;
pub mod tree_sim;

pub use error::{Error, Result};
pub use model::{make_initial, ModelSpec, TailMeta};
pub use offspring::OffspringLaw;
pub use pmf::{LatticePmf, LatticeStep, TruncationBudget};
