//! Deterministic building blocks for weakly and semi-supervised sound event
//! detection experiments: trainable pooling operators, a small frame-level
//! predictor with hand-written backpropagation, mean-teacher weight
//! averaging, confidence-weighted losses, a synthetic polyphonic dataset
//! generator, and collar-based event scoring.
//!
//! Everything in this crate is pure computation. Given the same inputs and
//! seeds it produces bit-identical outputs on every platform: random numbers
//! come from keyed counter-mode streams, transcendentals go through `libm`,
//! and reductions run in a fixed order. File formats, run orchestration, and
//! the command line live in the companion `milpool-lab` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pooling;
pub mod synth;
pub mod teacher;
pub mod train;

pub use error::{Error, Result};
