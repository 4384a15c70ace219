use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use num_complex::Complex64;

use super::fft::{fft, ifft_unscaled};
use super::Waveform;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    PeriodicHann,
    Rectangular,
}

impl Window {
    pub fn samples(self, n: usize) -> Vec<f64> {
        match self {
            Window::PeriodicHann => (0..n).map(|i| 0.5 - 0.5 * libm::cos(TAU * i as f64 / n as f64)).collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

/// Framing and transform sizes. The defaults are 16 kHz speech framing:
/// 384-sample periodic Hann frames, 50 % overlap, 512-point DFT.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { frame_length: 384, hop: 192, fft_size: 512, window: Window::PeriodicHann }
    }
}

impl StftConfig {
    /// One-sided bin count, `K/2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames needed to cover `len` samples with tail zero-padding.
    pub fn n_frames(&self, len: usize) -> usize {
        if len <= self.frame_length {
            1
        } else {
            (len - self.frame_length).div_ceil(self.hop) + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_length == 0 || self.hop == 0 || self.hop > self.frame_length {
            bail!(Config, "frame length {} with hop {}", self.frame_length, self.hop);
        }
        if self.fft_size < self.frame_length || self.fft_size < 2 || !self.fft_size.is_multiple_of(2) {
            bail!(Config, "DFT size {} for frame length {}", self.fft_size, self.frame_length);
        }
        // Constant overlap-add: the shifted windows must sum to a constant.
        let w = self.window.samples(self.frame_length);
        let sums: Vec<f64> = (0..self.hop).map(|n| w.iter().skip(n).step_by(self.hop).sum()).collect();
        let (lo, hi) = sums.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
        if hi <= 0.0 || (hi - lo) > 1e-9 * hi {
            bail!(Config, "{:?} window of {} samples is not constant overlap-add at hop {}", self.window, self.frame_length, self.hop);
        }
        Ok(())
    }
}

/// One-sided complex spectrogram, `n_frames x (K/2 + 1)`, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    data: Vec<Complex64>,
    n_frames: usize,
    config: StftConfig,
    signal_len: usize,
}

impl Spectrogram {
    /// Wraps raw frame data. `signal_len` is the time-domain length that
    /// [`istft`] trims its output to.
    pub fn new(data: Vec<Complex64>, n_frames: usize, config: StftConfig, signal_len: usize) -> Result<Self> {
        config.validate()?;
        if n_frames == 0 {
            bail!(InvalidInput, "spectrogram needs at least one frame");
        }
        if data.len() != n_frames * config.n_bins() {
            bail!(Shape, "{} values for {} frames of {} bins", data.len(), n_frames, config.n_bins());
        }
        if signal_len > (n_frames - 1) * config.hop + config.frame_length {
            bail!(Shape, "signal length {} exceeds what {} frames cover", signal_len, n_frames);
        }
        Ok(Self { data, n_frames, config, signal_len })
    }

    pub fn zeros_like(other: &Spectrogram) -> Self {
        Self { data: vec![Complex64::new(0.0, 0.0); other.data.len()], ..other.clone() }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.config.n_bins()
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn frame(&self, l: usize) -> &[Complex64] {
        let k = self.n_bins();
        &self.data[l * k..(l + 1) * k]
    }

    pub fn get(&self, l: usize, k: usize) -> Complex64 {
        self.data[l * self.n_bins() + k]
    }

    pub fn same_layout(&self, other: &Spectrogram) -> bool {
        self.n_frames == other.n_frames && self.config == other.config
    }

    /// Copy with new values and the same layout.
    pub fn with_data(&self, data: Vec<Complex64>) -> Result<Self> {
        Self::new(data, self.n_frames, self.config, self.signal_len)
    }

    /// `|X_l(k)|` as an `(L, K/2+1)` tensor.
    pub fn magnitude(&self) -> Tensor {
        Tensor::from_vec(&[self.n_frames, self.n_bins()], self.data.iter().map(|c| c.norm()).collect()).expect("shape")
    }

    /// Real and imaginary parts as `(L, K/2+1)` tensors.
    pub fn parts(&self) -> (Tensor, Tensor) {
        let shape = [self.n_frames, self.n_bins()];
        let re = Tensor::from_vec(&shape, self.data.iter().map(|c| c.re).collect()).expect("shape");
        let im = Tensor::from_vec(&shape, self.data.iter().map(|c| c.im).collect()).expect("shape");
        (re, im)
    }

    pub fn from_parts(re: &Tensor, im: &Tensor, like: &Spectrogram) -> Result<Self> {
        if re.shape() != [like.n_frames, like.n_bins()] || im.shape() != re.shape() {
            bail!(Shape, "parts {:?}/{:?} for {}x{} spectrogram", re.shape(), im.shape(), like.n_frames, like.n_bins());
        }
        let data = re.data().iter().zip(im.data()).map(|(&a, &b)| Complex64::new(a, b)).collect();
        like.with_data(data)
    }
}

/// Short-time Fourier transform with tail zero-padding.
///
/// Frame `l` covers samples `[l*hop, l*hop + frame_length)`, is windowed,
/// zero-padded to the DFT size and transformed; the non-negative-frequency
/// half is kept.
pub fn stft(x: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if x.is_empty() {
        bail!(InvalidInput, "empty waveform");
    }
    let n_frames = cfg.n_frames(x.len());
    let bins = cfg.n_bins();
    let window = cfg.window.samples(cfg.frame_length);
    let samples = x.samples();
    let mut data = Vec::with_capacity(n_frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for l in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        let start = l * cfg.hop;
        for (i, w) in window.iter().enumerate() {
            if let Some(&s) = samples.get(start + i) {
                buf[i] = Complex64::new(s * w, 0.0);
            }
        }
        fft(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Spectrogram::new(data, n_frames, *cfg, x.len())
}

/// Weighted overlap-add synthesis.
///
/// Each frame is restored to a full Hermitian spectrum, inverse transformed,
/// truncated to the frame length, windowed again and overlap-added. The sum
/// is divided by the accumulated squared-window envelope; samples where the
/// envelope vanishes (the first sample under a periodic Hann window) are
/// returned as zero.
pub fn istft(spec: &Spectrogram, sample_rate_hz: u32) -> Result<Waveform> {
    let cfg = spec.config;
    let k = cfg.fft_size;
    let bins = cfg.n_bins();
    let window = cfg.window.samples(cfg.frame_length);
    let total = (spec.n_frames - 1) * cfg.hop + cfg.frame_length;
    let mut out = vec![0.0; total];
    let mut env = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); k];
    for l in 0..spec.n_frames {
        let frame = spec.frame(l);
        buf[..bins].copy_from_slice(frame);
        for j in 1..k - bins + 1 {
            buf[k - j] = frame[j].conj();
        }
        buf[0].im = 0.0;
        buf[k / 2].im = 0.0;
        ifft_unscaled(&mut buf);
        let start = l * cfg.hop;
        for (i, w) in window.iter().enumerate() {
            out[start + i] += w * buf[i].re / k as f64;
            env[start + i] += w * w;
        }
    }
    let tiny = 1e-10 * window.iter().map(|w| w * w).fold(0.0, f64::max);
    let samples = out.iter().zip(&env).take(spec.signal_len).map(|(&v, &e)| if e > tiny { v / e } else { 0.0 }).collect();
    Waveform::new(samples, sample_rate_hz)
}
