#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod learning;
pub mod model;
pub mod numerics;
pub mod phenotype;
pub mod summarize;
pub mod synth;
pub mod variational;

pub use error::{Error, Result};
