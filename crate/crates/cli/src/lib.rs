//! Files, formats and the command line around `pesqnet-core`.
//!
//! * [`wav`]: mono 16-bit and 32-bit float WAV.
//! * [`manifest`] and [`datasets`]: dataset manifests, mixture synthesis
//!   and a hermetic toy corpus.
//! * [`checkpoint`]: self-describing single-file model checkpoints.
//! * [`kv`] and [`run`]: flat key-value training configs.
//! * [`oracles`]: oracle selection, the external PESQ adapter and batch
//!   scoring.
//! * [`trace`] and [`evaluate`]: training traces and report tables.

pub mod checkpoint;
pub mod datasets;
mod error;
pub mod evaluate;
pub mod kv;
pub mod manifest;
pub mod oracles;
pub mod run;
pub mod trace;
pub mod wav;

pub use error::{Error, Result};
