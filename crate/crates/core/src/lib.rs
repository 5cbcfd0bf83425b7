//! Desk-scale laboratory for base-anchored preference optimization.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod provenance;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
