#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_form;
pub mod curve;
pub mod error;
pub mod gaussian;
pub mod mc;
pub mod model;
pub mod payoff;
pub mod pricer;
pub mod quantizer;
pub mod sum;
pub mod tree;

pub use error::{Error, Result};
