//! Numerical toolkit for passive-tracer transport in a locally stationary,
//! quasi-periodic random velocity field.
//!
//! The library covers the whole pipeline: synthesis of the velocity field
//! (`field`, `bank`), the frozen cell problem and its correctors (`cell`,
//! `galerkin`), effective drift and diffusivity (`effective`), the limiting
//! diffusion and its backward equation (`limit`), scaled characteristics
//! (`characteristics`), distributional diagnostics (`metrics`), and the
//! experiment harness (`config`, `harness`).

pub mod bank;
pub mod cell;
pub mod characteristics;
pub mod config;
pub mod effective;
pub mod ensemble;
pub mod error;
pub mod field;
pub mod galerkin;
pub mod harness;
pub mod interp;
pub mod limit;
pub mod metrics;
pub mod rng;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
