use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use super::fft::{fft, ifft_unscaled};
use super::Waveform;
use crate::error::{bail, Result};
use crate::rng::Rng;

/// Output of [`mix`]: `y = s_rev + noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub y: Waveform,
    pub s_rev: Waveform,
    /// The noise after length adjustment and SNR scaling.
    pub noise: Waveform,
}

/// Linear convolution `s * h` truncated to `len(s)`.
pub fn convolve(s: &[f64], h: &[f64]) -> Vec<f64> {
    let n = s.len();
    let taps = h.len().min(n);
    if taps <= 64 || n <= 64 {
        let mut out = vec![0.0; n];
        for (j, &hj) in h.iter().take(taps).enumerate() {
            if hj == 0.0 {
                continue;
            }
            for (o, &si) in out[j..].iter_mut().zip(s) {
                *o += hj * si;
            }
        }
        return out;
    }
    let size = (n + taps - 1).next_power_of_two();
    let mut a: Vec<Complex64> = s.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(size, Complex64::new(0.0, 0.0));
    let mut b: Vec<Complex64> = h[..taps].iter().map(|&v| Complex64::new(v, 0.0)).collect();
    b.resize(size, Complex64::new(0.0, 0.0));
    fft(&mut a);
    fft(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    ifft_unscaled(&mut a);
    a[..n].iter().map(|c| c.re / size as f64).collect()
}

/// Fits `d` to `len` samples: shorter noise is tiled, longer noise is cropped
/// starting at a random offset drawn from `rng`.
fn fit_noise(d: &[f64], len: usize, rng: &mut Rng) -> Vec<f64> {
    if d.len() >= len {
        let offset = if d.len() > len { rng.below(d.len() - len + 1) } else { 0 };
        d[offset..offset + len].to_vec()
    } else {
        d.iter().copied().cycle().take(len).collect()
    }
}

/// Gain that brings noise of mean power `noise_power` to `target_snr_db`
/// below `speech_power`. Infinite SNR gives zero gain.
pub fn scale_noise(speech_power: f64, noise_power: f64, target_snr_db: f64) -> Result<f64> {
    if target_snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    if !target_snr_db.is_finite() {
        bail!(InvalidInput, "target SNR must be finite or +inf, got {}", target_snr_db);
    }
    if noise_power <= 0.0 {
        bail!(InvalidInput, "noise is silent; cannot reach {} dB", target_snr_db);
    }
    Ok(libm::sqrt(speech_power / (noise_power * libm::pow(10.0, target_snr_db / 10.0))))
}

/// Builds `y = s * h + g d` where the gain `g` sets the whole-utterance power
/// ratio of `s * h` to `g d` to `target_snr_db`. `f64::INFINITY` means no
/// noise.
pub fn mix(s: &Waveform, h: &[f64], d: &Waveform, target_snr_db: f64, rng: &mut Rng) -> Result<Mixture> {
    if s.sample_rate_hz() != d.sample_rate_hz() {
        bail!(InvalidInput, "speech at {} Hz, noise at {} Hz", s.sample_rate_hz(), d.sample_rate_hz());
    }
    if h.is_empty() {
        bail!(InvalidInput, "empty impulse response");
    }
    if h.iter().any(|v| !v.is_finite()) {
        bail!(InvalidInput, "non-finite impulse response");
    }
    if s.power() == 0.0 {
        bail!(InvalidInput, "clean speech is silent");
    }
    let sr = s.sample_rate_hz();
    let s_rev = convolve(s.samples(), h);
    let s_rev = Waveform::new(s_rev, sr)?;
    let speech_power = s_rev.power();
    if speech_power == 0.0 {
        bail!(InvalidInput, "reverberant speech is silent");
    }
    let noise = if target_snr_db == f64::INFINITY || d.is_empty() {
        if target_snr_db != f64::INFINITY {
            bail!(InvalidInput, "empty noise signal");
        }
        vec![0.0; s.len()]
    } else {
        let fitted = fit_noise(d.samples(), s.len(), rng);
        let np = fitted.iter().map(|v| v * v).sum::<f64>() / fitted.len() as f64;
        let gain = scale_noise(speech_power, np, target_snr_db)?;
        fitted.into_iter().map(|v| v * gain).collect()
    };
    let y: Vec<f64> = s_rev.samples().iter().zip(&noise).map(|(a, b)| a + b).collect();
    Ok(Mixture { y: Waveform::new(y, sr)?, s_rev, noise: Waveform::new(noise, sr)? })
}
