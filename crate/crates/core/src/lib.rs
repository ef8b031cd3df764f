//! Lévy-driven (T, x)-forward rate models for CDO term structures.
//!
//! The crate simulates forward surfaces `f(t, T, x)` driven by a Lévy process
//! and a portfolio loss process, enforces the no-arbitrage drift conditions,
//! verifies them statistically by Monte Carlo, and prices single-tranche CDOs
//! and European loss derivatives from (T, x)-bonds.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod engine;
pub mod error;
pub mod hjm;
pub mod lattice;
pub mod levy;
pub mod loss;
pub mod market;
pub mod mc;
pub mod pricing;
pub mod quad;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
