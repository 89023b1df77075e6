//! Gradient-guided layer selection for selective LoRA fine-tuning.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod campaign;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod param;
pub mod probe;
pub mod report;
pub mod rng;
pub mod select;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
