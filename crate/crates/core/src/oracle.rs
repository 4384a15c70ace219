//! Ground-truth quality scorers.
//!
//! Training treats the truth source as a black box behind [`QualityOracle`].
//! Two hermetic scorers live here; the external PESQ adapter that shells out
//! to a P.862.2 binary lives in the `pesqnet` crate.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::dsp::Waveform;
use crate::error::{bail, Result};
use crate::pesqnet::{score_gate, PesqScore};

pub trait QualityOracle {
    /// Scores `degraded` against the clean `reference`.
    fn score(&self, degraded: &Waveform, reference: &Waveform) -> Result<PesqScore>;

    /// Short description for logs.
    fn name(&self) -> String;
}

impl<T: QualityOracle + ?Sized> QualityOracle for &T {
    fn score(&self, degraded: &Waveform, reference: &Waveform) -> Result<PesqScore> {
        (**self).score(degraded, reference)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

fn check_pair(degraded: &Waveform, reference: &Waveform) -> Result<()> {
    if degraded.sample_rate_hz() != reference.sample_rate_hz() {
        bail!(InvalidInput, "degraded at {} Hz, reference at {} Hz", degraded.sample_rate_hz(), reference.sample_rate_hz());
    }
    if degraded.len() != reference.len() {
        bail!(InvalidInput, "degraded has {} samples, reference {}", degraded.len(), reference.len());
    }
    if reference.power() == 0.0 {
        bail!(InvalidInput, "reference is silent");
    }
    Ok(())
}

/// Global SNR in dB of `reference` against the error `reference - degraded`.
/// Identical signals give `+inf`.
pub fn global_snr_db(degraded: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(degraded, reference)?;
    let signal: f64 = reference.samples().iter().map(|v| v * v).sum();
    let noise: f64 = reference.samples().iter().zip(degraded.samples()).map(|(r, d)| (r - d) * (r - d)).sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(signal / noise))
}

/// Maps the global SNR onto the PESQ range:
/// `1.04 + 3.6 * sigmoid((snr_db - offset_db) / slope_db)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateSnr {
    pub offset_db: f64,
    pub slope_db: f64,
}

impl Default for SurrogateSnr {
    fn default() -> Self {
        Self { offset_db: 10.0, slope_db: 5.0 }
    }
}

impl SurrogateSnr {
    pub fn from_snr_db(&self, snr_db: f64) -> Result<PesqScore> {
        if !(self.slope_db > 0.0) || !self.offset_db.is_finite() {
            bail!(Config, "surrogate slope must be positive and offset finite");
        }
        PesqScore::new(score_gate((snr_db - self.offset_db) / self.slope_db))
    }
}

impl QualityOracle for SurrogateSnr {
    fn score(&self, degraded: &Waveform, reference: &Waveform) -> Result<PesqScore> {
        self.from_snr_db(global_snr_db(degraded, reference)?)
    }

    fn name(&self) -> String {
        alloc::format!("surrogate_snr(offset={}, slope={})", self.offset_db, self.slope_db)
    }
}

/// Returns the same score for every input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantOracle(pub PesqScore);

impl QualityOracle for ConstantOracle {
    fn score(&self, degraded: &Waveform, reference: &Waveform) -> Result<PesqScore> {
        check_pair(degraded, reference)?;
        Ok(self.0)
    }

    fn name(&self) -> String {
        alloc::format!("constant({})", self.0)
    }
}

/// Memoises oracle scores by utterance id and enhancement-model fingerprint.
#[derive(Clone, Debug, Default)]
pub struct ScoreCache {
    entries: BTreeMap<(String, u64), PesqScore>,
    hits: usize,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_score(&mut self, oracle: &dyn QualityOracle, utterance_id: &str, model_fingerprint: u64, degraded: &Waveform, reference: &Waveform) -> Result<PesqScore> {
        let key = (String::from(utterance_id), model_fingerprint);
        if let Some(&s) = self.entries.get(&key) {
            self.hits += 1;
            return Ok(s);
        }
        let s = oracle.score(degraded, reference)?;
        self.entries.insert(key, s);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> usize {
        self.hits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec::Vec;

    fn wave(seed: u64) -> Waveform {
        let mut rng = Rng::new(seed);
        Waveform::new((0..1600).map(|_| rng.normal()).collect(), 16_000).unwrap()
    }

    #[test]
    fn surrogate_examples() {
        let o = SurrogateSnr::default();
        let s = wave(1);
        assert_eq!(o.score(&s, &s).unwrap().value(), 4.64);
        assert_eq!(o.from_snr_db(10.0).unwrap().value(), 2.84);
        assert!(o.from_snr_db(40.0).unwrap().value() >= 4.63);
        let silent = Waveform::new(alloc::vec![0.0; 1600], 16_000).unwrap();
        assert!(o.score(&s, &silent).is_err());
    }

    #[test]
    fn surrogate_is_monotone_in_fidelity() {
        let o = SurrogateSnr::default();
        let (s, n) = (wave(2), wave(3));
        let mut last = 0.0;
        for gain in [1.0, 0.5, 0.2, 0.1, 0.01] {
            let d: Vec<f64> = s.samples().iter().zip(n.samples()).map(|(a, b)| a + gain * b).collect();
            let v = o.score(&Waveform::new(d, 16_000).unwrap(), &s).unwrap().value();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn cache_avoids_rescoring() {
        let mut cache = ScoreCache::new();
        let o = SurrogateSnr::default();
        let (a, b) = (wave(4), wave(5));
        let x = cache.get_or_score(&o, "u1", 7, &a, &b).unwrap();
        let y = cache.get_or_score(&o, "u1", 7, &a, &b).unwrap();
        assert_eq!(x, y);
        assert_eq!((cache.len(), cache.hits()), (1, 1));
        cache.get_or_score(&o, "u1", 8, &a, &b).unwrap();
        assert_eq!(cache.len(), 2);
    }
}
