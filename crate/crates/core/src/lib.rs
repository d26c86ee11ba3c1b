//! Constructive approximation of sparse right-stochastic matrices by a
//! self-attention module whose query/key weights are fixed in advance.
//!
//! The pipeline takes a target matrix `A` ([`matrices`]), turns it into the
//! shifted log matrix `B` and factors it ([`construct`]), compresses the
//! factors with a random Stiefel projection into attention inputs `X`,
//! evaluates the resulting attention matrix ([`attention`]) and checks the
//! two ratio conditions that define a good approximation ([`verify`]).
//! [`sweep`] wraps this in the width-search experiment harness and
//! [`concentration`] benchmarks the underlying dot-product concentration
//! for orthogonal versus i.i.d. projections.

pub mod attention;
pub mod concentration;
pub mod construct;
pub mod dense;
pub mod error;
pub mod matrices;
pub mod registry;
pub mod render;
pub mod seed;
pub mod sweep;
pub mod verify;

pub use error::{Error, Result};
