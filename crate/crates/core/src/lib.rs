#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
