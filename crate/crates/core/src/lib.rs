//! Weakly-supervised degree-of-eye-openness estimation.
//!
//! A small Max-Feature-Map CNN regresses eye openness (0 closed, 100 fully
//! open) from 48x128 grayscale eye crops. It is trained jointly on exactly
//! labeled synthetic crops and on domain-shifted crops that only carry an
//! open/closed label.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod preprocess;
pub mod scene;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
