//! Contrastive forward/inverse latent dynamics with a 2D rope testbed.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod control;
pub mod env;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod models;
pub mod persist;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
