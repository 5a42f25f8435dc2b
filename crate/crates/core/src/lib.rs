//! Elliptical implicit copula variational inference.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod copula_va;
pub mod data_prep;
pub mod elliptical;
pub mod error;
pub mod factor_scale;
pub mod fdcheck;
pub mod kl_bench;
pub mod numerics;
pub mod optimizer;
pub mod report;
pub mod targets;
pub mod transforms;

pub use error::{Error, Result};
