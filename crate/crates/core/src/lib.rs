//! Offline signature verification: writer-independent CNN feature learning
//! with an auxiliary forgery output, per-user class-weighted SVMs on the
//! learned features, and the FRR/FAR/EER/AUC evaluation protocol.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod seed;
pub mod svm;
pub mod tensor;
pub mod training;
pub mod wd;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
