//! Conditional flow matching for synthetic phenotype screens.
//!
//! The crate is organised bottom-up: [`autodiff`] provides tensors and a
//! reverse-mode tape, [`interpolant`] and [`coupling`] build training pairs,
//! [`model`] holds the velocity networks, [`train`] fits them, [`sample`]
//! integrates the learned flow, [`metrics`] scores samples and [`data`]
//! generates screens and reads/writes tensor files.

// Range checks are written `!(x > lo)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod coupling;
pub mod data;
pub mod error;
pub mod interpolant;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sample;
pub mod train;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
