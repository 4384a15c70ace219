//! Perceptually mediated deep noise suppression.
//!
//! This crate holds the algorithmic core: STFT analysis/synthesis and the
//! mixture model, a mask-estimating enhancement network (DNS), the PESQ
//! estimator network in its non-intrusive, early-fusion and middle-fusion
//! variants, the training objectives, and the pre-training and alternating
//! fine-tuning protocols. Everything runs on in-memory data; file formats,
//! audio IO and the command line live in the companion `pesqnet` crate.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod dns;
pub mod dsp;
mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod pesqnet;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
