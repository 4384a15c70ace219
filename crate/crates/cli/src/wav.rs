//! Mono WAV files, 16-bit integer or 32-bit float.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use pesqnet_core::dsp::Waveform;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Reads a mono file recorded at `expected_rate_hz`. 16-bit samples are
/// scaled to `[-1, 1)`.
pub fn read_wav(path: &Path, expected_rate_hz: u32) -> Result<Waveform> {
    let wav_err = |source| Error::Wav { path: path.into(), source };
    let mut reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(path, format!("{} channels; only mono is supported", spec.channels)));
    }
    if spec.sample_rate != expected_rate_hz {
        return Err(Error::ResampleRequired { path: path.into(), found: spec.sample_rate, expected: expected_rate_hz });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader.samples::<i16>().map(|s| s.map(|v| f64::from(v) / 32768.0)).collect::<Result<_, _>>().map_err(wav_err)?,
        (SampleFormat::Float, 32) => reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(wav_err)?,
        (f, b) => return Err(Error::format(path, format!("unsupported sample format {f:?} with {b} bits"))),
    };
    Ok(Waveform::new(samples, spec.sample_rate)?)
}

/// Writes `wave` as mono. 16-bit output is clipped to the representable
/// range.
pub fn write_wav(path: &Path, wave: &Waveform, format: WavFormat) -> Result<()> {
    let wav_err = |source| Error::Wav { path: path.into(), source };
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec { channels: 1, sample_rate: wave.sample_rate_hz(), bits_per_sample: bits, sample_format };
    let mut w = WavWriter::create(path, spec).map_err(wav_err)?;
    for &v in wave.samples() {
        match format {
            WavFormat::Pcm16 => w.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            WavFormat::Float32 => w.write_sample(v as f32),
        }
        .map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let wave = Waveform::new((0..400).map(|i| 0.5 * (i as f64 * 0.1).sin()).collect(), 16_000).unwrap();
        let p = dir.path().join("f.wav");
        write_wav(&p, &wave, WavFormat::Float32).unwrap();
        let back = read_wav(&p, 16_000).unwrap();
        assert!(back.samples().iter().zip(wave.samples()).all(|(a, b)| (a - b).abs() < 1e-7));
        let p = dir.path().join("i.wav");
        write_wav(&p, &wave, WavFormat::Pcm16).unwrap();
        let back = read_wav(&p, 16_000).unwrap();
        assert!(back.samples().iter().zip(wave.samples()).all(|(a, b)| (a - b).abs() <= 0.5 / 32768.0 + 1e-12));
    }

    #[test]
    fn other_rate_requires_resampling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        write_wav(&p, &Waveform::new(vec![0.1; 80], 8_000).unwrap(), WavFormat::Pcm16).unwrap();
        assert!(matches!(read_wav(&p, 16_000), Err(Error::ResampleRequired { found: 8_000, expected: 16_000, .. })));
    }
}
