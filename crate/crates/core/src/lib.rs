//! Differentially private answering of prefix-sum workloads over a single
//! numerical attribute.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`] holds datasets, bucketization, prefix workloads and the
//!   truncation operator.
//! * [`noise`] provides Laplace sampling, L1 sensitivity, the sparse vector
//!   technique and exact privacy-budget accounting.
//! * [`threshold`] privately selects a truncation threshold.
//! * [`strategy`] builds hierarchical strategy matrices, solves least squares
//!   and evaluates closed-form expected errors.
//! * [`mechanisms`] implements the single-query and batch mechanisms.
//! * [`isotonic`] post-processes noisy prefix answers.
//! * [`evaluation`] runs seeded multi-trial experiments.

// `!(a < b)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod evaluation;
pub mod isotonic;
pub mod mechanisms;
pub mod noise;
pub mod strategy;
pub mod threshold;

pub use error::{Error, Result};
