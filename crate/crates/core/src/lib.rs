//! Deep networks of random trigonometric features whose frequency and weight
//! matrices carry diagonal Student's-t variational posteriors, trained against
//! a closed-form t-divergence to a heavy-tailed prior.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod par;
pub mod tdist;
pub mod tdivergence;
pub mod training;

pub use error::{Error, Result};
