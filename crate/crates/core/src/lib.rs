//! Adversarial attacks on discrete-time spiking convolutional networks that
//! classify binary event-camera rasters.
//!
//! * [`event_data`]: event streams, rasterisation, file formats, the
//!   synthetic moving-bar dataset.
//! * [`snn`]: the integrate-and-fire network engine with surrogate-gradient
//!   backpropagation through time.
//! * [`training`]: BPTT training, analog-to-spiking weight transfer, 8-bit
//!   quantisation and TRADES adversarial training.
//! * [`attacks`]: DeepFool, SpikeFool, straight-through and probabilistic
//!   PGD, adversarial patches.
//! * [`harness`]: attack campaigns, metrics and reports.

// Config checks spell `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod error;
pub mod event_data;
pub mod harness;
pub mod snn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
