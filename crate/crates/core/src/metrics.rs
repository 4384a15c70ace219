//! Segmental SNR improvement and report aggregation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::dsp::Waveform;
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegSnrConfig {
    pub segment_len: usize,
    pub clamp_lo_db: f64,
    pub clamp_hi_db: f64,
    /// Segments whose clean energy is below this fraction of the mean
    /// segment energy are skipped.
    pub silence_ratio: f64,
}

impl Default for SegSnrConfig {
    fn default() -> Self {
        Self { segment_len: 512, clamp_lo_db: -10.0, clamp_hi_db: 35.0, silence_ratio: 1e-8 }
    }
}

impl SegSnrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 || !(self.clamp_lo_db < self.clamp_hi_db) || !(self.silence_ratio >= 0.0) {
            bail!(Config, "segmental SNR config {:?}", self);
        }
        Ok(())
    }
}

/// Mean clamped per-segment SNR of `signal` against `clean`. Segments are
/// non-overlapping; a shorter final segment is kept.
pub fn seg_snr(signal: &[f64], clean: &[f64], cfg: &SegSnrConfig) -> Result<f64> {
    cfg.validate()?;
    if signal.len() != clean.len() {
        bail!(InvalidInput, "signal has {} samples, clean {}", signal.len(), clean.len());
    }
    let energies: Vec<f64> = clean.chunks(cfg.segment_len).map(|c| c.iter().map(|v| v * v).sum()).collect();
    if energies.is_empty() {
        bail!(InvalidInput, "empty signals");
    }
    let mean_energy = energies.iter().sum::<f64>() / energies.len() as f64;
    if mean_energy == 0.0 {
        bail!(InvalidInput, "clean reference is silent");
    }
    let threshold = cfg.silence_ratio * mean_energy;
    let (mut total, mut count) = (0.0, 0usize);
    for ((sig, cl), &e) in signal.chunks(cfg.segment_len).zip(clean.chunks(cfg.segment_len)).zip(&energies) {
        if e < threshold || e == 0.0 {
            continue;
        }
        let err: f64 = sig.iter().zip(cl).map(|(a, b)| (a - b) * (a - b)).sum();
        let snr = if err == 0.0 { cfg.clamp_hi_db } else { 10.0 * libm::log10(e / err) };
        total += snr.clamp(cfg.clamp_lo_db, cfg.clamp_hi_db);
        count += 1;
    }
    Ok(total / count as f64)
}

/// Segmental SNR of `enhanced` minus that of `noisy`, both against
/// `clean`.
pub fn delta_snr_seg(enhanced: &Waveform, noisy: &Waveform, clean: &Waveform, cfg: &SegSnrConfig) -> Result<f64> {
    if enhanced.len() != noisy.len() || noisy.len() != clean.len() {
        bail!(InvalidInput, "lengths differ: enhanced {}, noisy {}, clean {}", enhanced.len(), noisy.len(), clean.len());
    }
    let e = seg_snr(enhanced.samples(), clean.samples(), cfg)?;
    let n = seg_snr(noisy.samples(), clean.samples(), cfg)?;
    Ok(e - n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    NoReverb,
    Reverb,
}

impl Condition {
    pub fn label(self) -> &'static str {
        match self {
            Condition::NoReverb => "without reverb",
            Condition::Reverb => "with reverb",
        }
    }
}

/// Metric names used in reports.
pub const METRIC_PESQ: &str = "pesq";
pub const METRIC_DELTA_SNR_SEG: &str = "delta_snr_seg";
pub const METRIC_SRMR: &str = "srmr";

/// Metrics measured on one utterance for one method.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceResult {
    pub utterance_id: String,
    pub condition: Condition,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub condition: Condition,
    pub means: BTreeMap<String, f64>,
    pub n_utterances: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// `(method, utterance id, message)` for every failed utterance.
    pub failures: Vec<(String, String, String)>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one method's per-utterance results, one row per condition
    /// present.
    pub fn add_method(&mut self, method: &str, results: &[UtteranceResult]) {
        for cond in [Condition::NoReverb, Condition::Reverb] {
            let subset: Vec<&UtteranceResult> = results.iter().filter(|r| r.condition == cond).collect();
            if subset.is_empty() {
                continue;
            }
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for r in &subset {
                for (k, &v) in &r.metrics {
                    let e = sums.entry(k.clone()).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
            }
            let means = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
            self.rows.push(ReportRow { method: method.into(), condition: cond, means, n_utterances: subset.len() });
        }
    }

    pub fn record_failure(&mut self, method: &str, utterance_id: &str, message: &str) {
        self.failures.push((method.into(), utterance_id.into(), message.into()));
    }

    pub fn row(&self, method: &str, condition: Condition) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.condition == condition)
    }

    fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    fn cell(&self, method: &str, cond: Condition, metric: &str) -> String {
        match self.row(method, cond).and_then(|r| r.means.get(metric)) {
            Some(v) => alloc::format!("{v:.3}"),
            None => String::from("n/a"),
        }
    }

    fn count(&self, method: &str, cond: Condition) -> usize {
        self.row(method, cond).map_or(0, |r| r.n_utterances)
    }

    /// Long-format CSV: `method,condition,metric,mean,n_utterances`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,condition,metric,mean,n_utterances\n");
        for r in &self.rows {
            for (k, v) in &r.means {
                let _ = writeln!(out, "{},{},{},{},{}", r.method, r.condition.label(), k, v, r.n_utterances);
            }
        }
        out
    }

    /// Markdown table with "without reverb" and "with reverb" column groups.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Method | w/o reverb: PESQ | w/o reverb: ΔSNRseg [dB] | w/o reverb: n | with reverb: PESQ | with reverb: SRMR | with reverb: n |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for m in self.methods() {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                m,
                self.cell(m, Condition::NoReverb, METRIC_PESQ),
                self.cell(m, Condition::NoReverb, METRIC_DELTA_SNR_SEG),
                self.count(m, Condition::NoReverb),
                self.cell(m, Condition::Reverb, METRIC_PESQ),
                self.cell(m, Condition::Reverb, METRIC_SRMR),
                self.count(m, Condition::Reverb),
            );
        }
        if !self.failures.is_empty() {
            let _ = writeln!(out, "\n{} utterance(s) failed:", self.failures.len());
            for (m, u, e) in &self.failures {
                let _ = writeln!(out, "- {m} / {u}: {e}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn wave(rng: &mut Rng, n: usize, gain: f64) -> Waveform {
        Waveform::new((0..n).map(|_| gain * rng.normal()).collect(), 16_000).unwrap()
    }

    fn add(a: &Waveform, b: &Waveform) -> Waveform {
        Waveform::new(a.samples().iter().zip(b.samples()).map(|(x, y)| x + y).collect(), 16_000).unwrap()
    }

    #[allow(clippy::needless_range_loop)]
    fn loop_seg_snr(x: &[f64], c: &[f64]) -> f64 {
        let n_seg = c.len().div_ceil(512);
        let mut energies = alloc::vec![0.0; n_seg];
        for (i, v) in c.iter().enumerate() {
            energies[i / 512] += v * v;
        }
        let mean = energies.iter().sum::<f64>() / n_seg as f64;
        let mut vals = Vec::new();
        for s in 0..n_seg {
            if energies[s] < 1e-8 * mean {
                continue;
            }
            let mut err = 0.0;
            for i in s * 512..((s + 1) * 512).min(c.len()) {
                err += (x[i] - c[i]) * (x[i] - c[i]);
            }
            let db = 10.0 * libm::log10(energies[s] / err);
            vals.push(db.clamp(-10.0, 35.0));
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn identity_is_exactly_zero() {
        let mut rng = Rng::new(1);
        let (c, n) = (wave(&mut rng, 5000, 1.0), wave(&mut rng, 5000, 0.3));
        let y = add(&c, &n);
        assert_eq!(delta_snr_seg(&y, &y, &c, &SegSnrConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn clean_estimate_saturates() {
        let mut rng = Rng::new(2);
        let (c, n) = (wave(&mut rng, 4096, 1.0), wave(&mut rng, 4096, 0.5));
        let y = add(&c, &n);
        let cfg = SegSnrConfig::default();
        let d = delta_snr_seg(&c, &y, &c, &cfg).unwrap();
        assert!((d - (35.0 - seg_snr(y.samples(), c.samples(), &cfg).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn matches_loop() {
        let mut rng = Rng::new(3);
        let cfg = SegSnrConfig::default();
        for _ in 0..10 {
            let n = 3000 + rng.below(3000);
            let c = wave(&mut rng, n, 1.0);
            let mut cs = c.clone().into_samples();
            cs[..600].iter_mut().for_each(|v| *v = 0.0);
            let c = Waveform::new(cs, 16_000).unwrap();
            let y = add(&c, &wave(&mut rng, n, 0.4));
            let e = add(&c, &wave(&mut rng, n, 0.1));
            let d = delta_snr_seg(&e, &y, &c, &cfg).unwrap();
            let oracle = loop_seg_snr(e.samples(), c.samples()) - loop_seg_snr(y.samples(), c.samples());
            assert!((d - oracle).abs() < 1e-10, "{d} vs {oracle}");
        }
    }

    #[test]
    fn errors() {
        let mut rng = Rng::new(4);
        let c = wave(&mut rng, 100, 1.0);
        let short = wave(&mut rng, 99, 1.0);
        let cfg = SegSnrConfig::default();
        assert!(delta_snr_seg(&c, &short, &c, &cfg).is_err());
        let silent = Waveform::new(alloc::vec![0.0; 100], 16_000).unwrap();
        assert!(delta_snr_seg(&c, &c, &silent, &cfg).is_err());
    }

    #[test]
    fn report_rows_and_rendering() {
        let res = |id: &str, cond, v: f64| UtteranceResult { utterance_id: id.into(), condition: cond, metrics: [(String::from(METRIC_PESQ), v)].into_iter().collect() };
        let mut rep = EvalReport::new();
        rep.add_method("a", &[res("u1", Condition::NoReverb, 2.0), res("u2", Condition::NoReverb, 3.0), res("u3", Condition::Reverb, 1.5)]);
        rep.add_method("b", &[res("u1", Condition::NoReverb, 4.0), res("u2", Condition::NoReverb, 4.0), res("u3", Condition::Reverb, 2.5)]);
        assert_eq!(rep.row("a", Condition::NoReverb).unwrap().means[METRIC_PESQ], 2.5);
        assert_eq!(rep.row("a", Condition::NoReverb).unwrap().n_utterances, rep.row("b", Condition::NoReverb).unwrap().n_utterances);
        let md = rep.to_markdown();
        assert!(md.contains("| a | 2.500 | n/a | 2 | 1.500 | n/a | 1 |"));
        assert_eq!(rep.to_csv().lines().count(), 5);
    }

    proptest! {
        #[test]
        fn common_gain_invariance(seed in 0u64..1000, gain in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let c = wave(&mut rng, 2048, 1.0);
            let y = add(&c, &wave(&mut rng, 2048, 0.5));
            let e = add(&c, &wave(&mut rng, 2048, 0.2));
            let cfg = SegSnrConfig::default();
            let scale = |w: &Waveform| Waveform::new(w.samples().iter().map(|v| v * gain).collect(), 16_000).unwrap();
            let a = delta_snr_seg(&e, &y, &c, &cfg).unwrap();
            let b = delta_snr_seg(&scale(&e), &scale(&y), &scale(&c), &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn self_difference_is_zero(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let c = wave(&mut rng, 1500, 1.0);
            let x = wave(&mut rng, 1500, 1.0);
            prop_assert_eq!(delta_snr_seg(&x, &x, &c, &SegSnrConfig::default()).unwrap(), 0.0);
        }
    }
}
