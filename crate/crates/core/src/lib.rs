//! Attack-and-reset machine unlearning.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`nn`]: a small CNN classifier with reverse-mode gradients
//!   with respect to both parameters and inputs, plus momentum SGD.
//! - [`data`]: the five-way split (train / test / forget / retain / unseen),
//!   a synthetic cohort-structured generator and a PNG + CSV directory format.
//! - [`attack`]: sample-wise PGD noise for the forget set.
//! - [`masking`]: per-filter gradient-discrepancy scores, median-threshold
//!   filter masks, filter re-initialisation and the ablation strategies.
//! - [`unlearn`]: the attack → reset → fine-tune pipeline and the baseline
//!   unlearning methods behind one method registry.
//! - [`eval`]: utility, loss-based membership inference and NoMUS.

pub mod attack;
pub mod checksum;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod unlearn;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
