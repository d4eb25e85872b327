//! Federated relevance training of dynamic inter-intra graph (DIIG) models.
//!
//! The crate is a self-contained simulator: a small tensor library with
//! reverse-mode differentiation ([`numerics`]), a synthetic spatial-temporal
//! data generator ([`synthdata`]), static node-correlation baselines
//! ([`correlations`]), the DIIG model ([`diig`]), local distribution
//! characterisation ([`relevance`]), the federated protocol and its baselines
//! ([`federation`]), and experiment orchestration ([`harness`]).

pub mod error;
pub mod numerics;
pub mod rng;
pub mod synthdata;
pub mod correlations;
pub mod diig;
pub mod relevance;
pub mod federation;
pub mod harness;

pub use error::{Error, Result};
