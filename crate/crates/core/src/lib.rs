//! Signal-strength prediction for LTE cells from geodata.
//!
//! The pipeline: ingest a [`geo::Scenario`], trace direct paths through it
//! ([`raypath`]), evaluate analytical path-loss models and fit cell EIRPs
//! ([`channels`]), render receiver-centric images ([`imaging`]), assemble
//! training samples ([`features`]), learn the residual correction with a
//! small convolutional network ([`neural`]), and emit radio environment
//! maps ([`rem`]).

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geo;
pub mod geometry;

pub use error::{Error, Result};
pub mod channels;
pub mod raypath;
pub mod imaging;
pub mod features;
pub mod neural;
pub mod rem;
pub mod synth;
