//! Distributed adversarial training on simulated workers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod compress;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod probe;
pub mod runtime;

pub use error::{Error, Result};
