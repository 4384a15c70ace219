//! STFT analysis/synthesis and the reverberant noisy mixture model.

mod fft;
mod mix;
mod stft;

pub use fft::{fft, ifft_unscaled};
pub use mix::{convolve, mix, scale_noise, Mixture};
pub use num_complex::Complex64;
pub use stft::{istft, stft, Spectrogram, StftConfig, Window};

use alloc::vec::Vec;

use crate::error::{bail, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;

/// Mono time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            bail!(InvalidInput, "sample rate must be positive");
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            bail!(InvalidInput, "non-finite sample at index {}", i);
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean power `sum x^2 / len`; zero for an empty signal.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }
}
