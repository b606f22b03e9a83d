//! Margin-consistent attention-pooled multiple-instance classification on
//! synthetic patch bags.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayesopt;
pub mod cli;
pub mod error;
pub mod losses;
pub mod margins;
pub mod model;
pub mod numerics;
pub mod selftest;
pub mod stats;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
