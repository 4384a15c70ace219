//! Mixture synthesis from manifests and a hermetic toy corpus generator.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use pesqnet_core::dsp::{mix, Waveform, SAMPLE_RATE_HZ};
use pesqnet_core::rng::{fnv1a, Rng};
use pesqnet_core::training::Utterance;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestEntry, Split, NO_RIR};
use crate::wav::{read_wav, write_wav, WavFormat};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Builds `(y, s, s_rev)` for one entry. The noise crop offset is drawn
/// from a generator seeded by the utterance id and `seed`, so the result
/// depends only on the entry and the seed.
pub fn synthesize_entry(manifest: &Manifest, entry: &ManifestEntry, seed: u64, sample_rate_hz: u32) -> Result<Utterance> {
    let s = read_wav(&manifest.resolve(&entry.clean_path), sample_rate_hz)?;
    let d = read_wav(&manifest.resolve(&entry.noise_path), sample_rate_hz)?;
    let h = if entry.rir_path == NO_RIR { vec![1.0] } else { read_wav(&manifest.resolve(&entry.rir_path), sample_rate_hz)?.into_samples() };
    let mut rng = Rng::new(fnv1a(entry.utterance_id.bytes(), seed));
    let m = mix(&s, &h, &d, entry.snr_db, &mut rng).map_err(|e| Error::format(manifest.resolve(&entry.clean_path), format!("{}: {e}", entry.utterance_id)))?;
    Ok(Utterance::new(entry.utterance_id.clone(), m.y, s, m.s_rev)?)
}

/// Synthesises every entry of `split` in parallel, keeping manifest order.
pub fn load_split(manifest: &Manifest, split: Split, seed: u64, sample_rate_hz: u32) -> Vec<(String, Result<Utterance>)> {
    manifest.split(split).par_iter().map(|e| (e.utterance_id.clone(), synthesize_entry(manifest, e, seed, sample_rate_hz))).collect()
}

/// Like [`load_split`] but fails on the first bad entry.
pub fn load_split_strict(manifest: &Manifest, split: Split, seed: u64, sample_rate_hz: u32) -> Result<Vec<Utterance>> {
    load_split(manifest, split, seed, sample_rate_hz).into_iter().map(|(_, u)| u).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyCorpusConfig {
    pub n_utts: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self { n_utts: 16, seed: 0, duration_s: 1.0, sample_rate_hz: SAMPLE_RATE_HZ }
    }
}

/// Harmonic tone complex with a syllable-like envelope plus a band-passed
/// noise burst.
fn toy_speech(rng: &mut Rng, n: usize, sr: f64) -> Vec<f64> {
    let f0 = rng.uniform_range(100.0, 260.0);
    let harmonics = 3 + rng.below(4);
    let syllable_hz = rng.uniform_range(2.0, 5.0);
    let amps: Vec<f64> = (1..=harmonics).map(|k| rng.uniform_range(0.3, 1.0) / k as f64).collect();
    let vibrato = rng.uniform_range(0.0, 0.03);
    let mut phase = 0.0;
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + vibrato * (TAU * 5.0 * t).sin());
            phase += TAU * f / sr;
            let env = (0.5 - 0.5 * (TAU * syllable_hz * t).cos()).powf(1.5);
            env * amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase).sin()).sum::<f64>()
        })
        .collect();
    // Fricative-like burst: one-pole high-passed noise.
    let start = rng.below(n / 2 + 1);
    let len = (n / 6).min(n - start);
    let mut prev = 0.0;
    for v in &mut out[start..start + len] {
        let w = rng.normal();
        *v += 0.15 * (w - prev);
        prev = w;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    out.iter().map(|v| 0.5 * v / peak).collect()
}

/// White noise through a random one-pole low-pass.
fn toy_noise(rng: &mut Rng, n: usize) -> Vec<f64> {
    let a = rng.uniform_range(0.0, 0.95);
    let mut state = 0.0;
    (0..n)
        .map(|_| {
            state = a * state + (1.0 - a) * rng.normal();
            state
        })
        .collect()
}

/// Direct path followed by an exponentially decaying noise tail.
fn toy_rir(rng: &mut Rng, sr: f64) -> Vec<f64> {
    let t60 = rng.uniform_range(0.15, 0.4);
    let n = (0.25 * sr) as usize;
    let decay = 6.9 / (t60 * sr);
    let mut h: Vec<f64> = (0..n).map(|i| 0.3 * rng.normal() * (-decay * i as f64).exp()).collect();
    h[0] = 1.0;
    h
}

fn split_for(i: usize) -> Split {
    match (i / 2) % 6 {
        3 => Split::Val,
        4 => Split::Dev,
        5 => Split::Test,
        _ => Split::Train,
    }
}

/// Writes clean, noise and impulse-response WAVs plus a manifest into
/// `out_dir`. Odd-numbered utterances are reverberant, so every split has
/// both conditions.
pub fn generate_toy_corpus(out_dir: &Path, cfg: &ToyCorpusConfig) -> Result<Manifest> {
    for sub in ["clean", "noise", "rir"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }
    let sr = cfg.sample_rate_hz as f64;
    let n = (cfg.duration_s * sr).round() as usize;
    if n == 0 && cfg.n_utts > 0 {
        return Err(Error::Config("toy utterances must be at least one sample long".into()));
    }
    let entries = (0..cfg.n_utts)
        .into_par_iter()
        .map(|i| {
            let id = format!("toy{i:04}");
            let mut rng = Rng::new(fnv1a(id.bytes(), cfg.seed));
            let clean = Waveform::new(toy_speech(&mut rng, n, sr), cfg.sample_rate_hz)?;
            let noise = Waveform::new(toy_noise(&mut rng, n + n / 2), cfg.sample_rate_hz)?;
            let snr_db = rng.uniform_range(0.0, 15.0).round();
            let clean_path = format!("clean/{id}.wav");
            let noise_path = format!("noise/{id}.wav");
            write_wav(&out_dir.join(&clean_path), &clean, WavFormat::Float32)?;
            write_wav(&out_dir.join(&noise_path), &noise, WavFormat::Float32)?;
            let rir_path = if i % 2 == 1 {
                let p = format!("rir/{id}.wav");
                write_wav(&out_dir.join(&p), &Waveform::new(toy_rir(&mut rng, sr), cfg.sample_rate_hz)?, WavFormat::Float32)?;
                p
            } else {
                NO_RIR.to_string()
            };
            Ok(ManifestEntry { utterance_id: id, clean_path, rir_path, noise_path, snr_db, split: split_for(i) })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(entries, out_dir)?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
