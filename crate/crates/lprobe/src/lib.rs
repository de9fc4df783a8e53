// Validation guards use `!(x > 0.0)` on purpose: unlike `x <= 0.0`, the
// negated form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Loss-landscape probing toolkit.
//!
//! Trains small MLP classifiers under several sharpness-related objectives,
//! computes generalization measures on the trained weights, and correlates
//! those measures with zero-shot transfer accuracy across synthetic domain
//! suites. Everything is seeded and deterministic: the same inputs produce
//! bit-identical artifacts.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod graph;
pub mod measures;
pub mod model;
pub mod objectives;
pub mod tensor;
