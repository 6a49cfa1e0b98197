//! Off-policy evaluation for tabular Markov decision processes.
//!
//! The crate covers the full pipeline: exact dynamic programming on a known
//! MDP ([`mdp`]), data generation ([`sampling`]), nuisance estimation for
//! the stationary density ratio and the q-function ([`nuisance`]), the
//! importance-sampling, direct, marginalized and doubly robust estimators
//! with cross-fitting and confidence intervals ([`estimators`]), exact
//! efficiency bounds ([`oracle`]), and a Monte-Carlo harness ([`experiments`]).

pub mod error;
pub mod estimators;
pub mod experiments;
pub mod linalg;
pub mod mdp;
pub mod nuisance;
pub mod oracle;
pub mod rng;
pub mod sampling;

pub use error::{OpeError, Result};
