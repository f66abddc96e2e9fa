//! Shared numeric primitives: keyed random streams, dense row-major
//! matrices, and the finite-difference gradient every analytic backward
//! pass is checked against.

mod fdiff;
mod matrix;
mod rng;

pub use fdiff::{finite_diff_gradient, max_rel_err, rel_err, FD_STEP};
pub use matrix::Matrix;
pub use rng::{stream, RngStream};
