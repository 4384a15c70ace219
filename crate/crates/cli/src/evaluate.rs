//! Evaluation harness producing per-condition report tables.

use std::collections::BTreeMap;

use pesqnet_core::dns::DnsModel;
use pesqnet_core::dsp::Waveform;
use pesqnet_core::metrics::{delta_snr_seg, Condition, EvalReport, SegSnrConfig, UtteranceResult, METRIC_DELTA_SNR_SEG, METRIC_PESQ};
use pesqnet_core::nn::ParamStore;
use pesqnet_core::oracle::QualityOracle;
use pesqnet_core::training::Utterance;
use rayon::prelude::*;

use crate::datasets::synthesize_entry;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, Split};

/// Something that turns a noisy mixture into an estimate.
pub enum Method {
    /// The unprocessed mixture.
    Noisy,
    /// The clean speech itself; an upper bound.
    Clean,
    Dns {
        name: String,
        model: DnsModel,
        params: ParamStore,
    },
}

impl Method {
    pub fn name(&self) -> &str {
        match self {
            Method::Noisy => "noisy",
            Method::Clean => "clean",
            Method::Dns { name, .. } => name,
        }
    }

    fn enhance(&self, u: &Utterance) -> pesqnet_core::Result<Waveform> {
        match self {
            Method::Noisy => Ok(u.y.clone()),
            Method::Clean => Ok(u.s.clone()),
            Method::Dns { model, params, .. } => model.enhance(params, &u.y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub seg_snr: SegSnrConfig,
}

fn measure(method: &Method, u: &Utterance, condition: Condition, oracle: &(dyn QualityOracle + Sync), cfg: &EvalConfig) -> pesqnet_core::Result<BTreeMap<String, f64>> {
    let enhanced = method.enhance(u)?;
    let mut m = BTreeMap::new();
    m.insert(METRIC_PESQ.to_string(), oracle.score(&enhanced, &u.s)?.value());
    // Segmental SNR is only meaningful without reverberation.
    if condition == Condition::NoReverb {
        m.insert(METRIC_DELTA_SNR_SEG.to_string(), delta_snr_seg(&enhanced, &u.y, &u.s, &cfg.seg_snr)?);
    }
    Ok(m)
}

/// Metrics per method, or the failing method and its error message.
type UtteranceOutcome = std::result::Result<Vec<BTreeMap<String, f64>>, (String, String)>;

/// Evaluates every method on `split`. An utterance that fails to load or
/// fails for any method is recorded and left out for all methods, so every
/// row averages over the same utterances.
pub fn evaluate(manifest: &Manifest, split: Split, methods: &[Method], oracle: &(dyn QualityOracle + Sync), cfg: &EvalConfig) -> Result<EvalReport> {
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::Config(format!("split `{split}` is empty")));
    }
    if methods.is_empty() {
        return Err(Error::Config("no methods to evaluate".into()));
    }
    let per_utt: Vec<(String, Condition, UtteranceOutcome)> = entries
        .par_iter()
        .map(|e| {
            let cond = if e.has_reverb() { Condition::Reverb } else { Condition::NoReverb };
            let res = match synthesize_entry(manifest, e, cfg.seed, cfg.sample_rate_hz) {
                Err(err) => Err(("*".to_string(), err.to_string())),
                Ok(u) => methods.iter().map(|m| measure(m, &u, cond, oracle, cfg).map_err(|err| (m.name().to_string(), err.to_string()))).collect(),
            };
            (e.utterance_id.clone(), cond, res)
        })
        .collect();

    let mut report = EvalReport::new();
    let mut results: Vec<Vec<UtteranceResult>> = methods.iter().map(|_| Vec::new()).collect();
    for (id, cond, res) in per_utt {
        match res {
            Ok(metrics) => {
                for (i, m) in metrics.into_iter().enumerate() {
                    results[i].push(UtteranceResult { utterance_id: id.clone(), condition: cond, metrics: m });
                }
            }
            Err((method, msg)) => report.record_failure(&method, &id, &msg),
        }
    }
    for (m, r) in methods.iter().zip(&results) {
        report.add_method(m.name(), r);
    }
    Ok(report)
}
