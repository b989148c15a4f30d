//! Mirror descent with hand-crafted and learned mirror maps.
//!
//! The crate provides classical mirror descent over closed-form potentials
//! (euclidean, entropic, quadratic, one-layer), learned mirror descent with an
//! input-convex forward potential and an approximate backward map, an unrolled
//! training loop for both, and diagnostics that evaluate the associated regret
//! bounds numerically on every run.

// index loops are the clearer idiom in the dense numeric kernels here
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod diagnostics;
pub mod linalg;
pub mod par;
pub mod potentials;
pub mod problems;
pub mod rng;
pub mod solvers;
pub mod tape;
pub mod tensor;
pub mod training;
