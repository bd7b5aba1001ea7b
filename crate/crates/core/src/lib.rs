//! In-loop meta-learning during SGD.
//!
//! Per-example gradient-alignment rewards are computed from artifacts of an
//! ordinary backward pass and drive REINFORCE updates of non-differentiable
//! sampling policies (data-split choice, augmentation strategy) while the
//! network trains.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod data;
pub mod error;
pub mod galign;
pub mod meta;
pub mod nn;
pub mod par;
pub mod policies;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
