//! Workbench for differentially private few-shot transfer learning.
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod config;
pub mod data;
pub mod dp_optim;
pub mod error;
pub mod fed;
pub mod io;
pub mod mia;
pub mod model;
pub mod plot;
pub mod protocol;
pub mod rng;
pub mod workbench;

pub use error::{Error, Result};
