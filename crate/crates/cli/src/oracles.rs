//! Oracle selection, the external PESQ adapter and parallel batch scoring.

use std::path::PathBuf;
use std::process::Command;

use pesqnet_core::dsp::{Waveform, SAMPLE_RATE_HZ};
use pesqnet_core::oracle::{ConstantOracle, QualityOracle, SurrogateSnr};
use pesqnet_core::pesqnet::PesqScore;
use rayon::prelude::*;
use regex::Regex;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::wav::{write_wav, WavFormat};

/// Matches the score line of the ITU-T reference implementation, e.g.
/// `P.862.2 Prediction (MOS-LQO):  = 3.456`.
pub const DEFAULT_SCORE_PATTERN: &str = r"MOS-LQO\)?:?\s*=\s*([0-9]+(?:\.[0-9]+)?)";

/// Runs a user-supplied P.862.2 executable on temporary WAV files and
/// parses the score from its standard output.
///
/// `args` may contain the placeholders `{reference}`, `{degraded}` and
/// `{rate}`.
#[derive(Clone, Debug)]
pub struct ExternalPesq {
    pub executable: PathBuf,
    pub args: Vec<String>,
    pub pattern: Regex,
}

impl ExternalPesq {
    pub fn new(executable: impl Into<PathBuf>, args: Vec<String>, pattern: &str) -> Result<Self> {
        let pattern = Regex::new(pattern).map_err(|e| Error::Config(format!("score pattern: {e}")))?;
        if pattern.captures_len() < 2 {
            return Err(Error::Config("score pattern needs a capture group".into()));
        }
        Ok(Self { executable: executable.into(), args, pattern })
    }

    fn default_args() -> Vec<String> {
        vec!["+{rate}".into(), "{reference}".into(), "{degraded}".into()]
    }

    fn run(&self, degraded: &Waveform, reference: &Waveform) -> Result<PesqScore, String> {
        if reference.sample_rate_hz() != SAMPLE_RATE_HZ || degraded.sample_rate_hz() != SAMPLE_RATE_HZ {
            return Err(format!("external PESQ needs {SAMPLE_RATE_HZ} Hz input"));
        }
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (rp, dp) = (dir.path().join("reference.wav"), dir.path().join("degraded.wav"));
        write_wav(&rp, reference, WavFormat::Pcm16).map_err(|e| e.to_string())?;
        write_wav(&dp, degraded, WavFormat::Pcm16).map_err(|e| e.to_string())?;
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| a.replace("{reference}", &rp.to_string_lossy()).replace("{degraded}", &dp.to_string_lossy()).replace("{rate}", &SAMPLE_RATE_HZ.to_string()))
            .collect();
        let out = Command::new(&self.executable).args(&args).current_dir(dir.path()).output().map_err(|e| format!("{}: {e}", self.executable.display()))?;
        if !out.status.success() {
            return Err(format!("{} exited with {}: {}", self.executable.display(), out.status, String::from_utf8_lossy(&out.stderr).trim()));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let value = self
            .pattern
            .captures_iter(&stdout)
            .last()
            .and_then(|c| c.get(1))
            .and_then(|m| m.as_str().parse::<f64>().ok())
            .ok_or_else(|| format!("no score matching `{}` in output", self.pattern.as_str()))?;
        PesqScore::saturating(value).map_err(|e| e.to_string())
    }
}

impl QualityOracle for ExternalPesq {
    fn score(&self, degraded: &Waveform, reference: &Waveform) -> pesqnet_core::Result<PesqScore> {
        if reference.power() == 0.0 {
            return Err(pesqnet_core::Error::InvalidInput("reference is silent".into()));
        }
        self.run(degraded, reference).map_err(pesqnet_core::Error::OracleUnavailable)
    }

    fn name(&self) -> String {
        format!("external_pesq({})", self.executable.display())
    }
}

#[derive(Clone, Debug)]
pub enum OracleSpec {
    ExternalPesq(ExternalPesq),
    SurrogateSnr(SurrogateSnr),
    Constant(ConstantOracle),
}

impl OracleSpec {
    /// Reads `oracle.*` keys; the surrogate is the default.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        Ok(match kv.str("oracle.kind").unwrap_or("surrogate_snr") {
            "surrogate_snr" => {
                let d = SurrogateSnr::default();
                OracleSpec::SurrogateSnr(SurrogateSnr { offset_db: kv.get_or("oracle.offset_db", d.offset_db)?, slope_db: kv.get_or("oracle.slope_db", d.slope_db)? })
            }
            "constant" => OracleSpec::Constant(ConstantOracle(PesqScore::new(kv.get_or("oracle.value", 3.0)?)?)),
            "external_pesq" => {
                let exe = kv.require("oracle.executable")?.to_string();
                let args = match kv.str("oracle.args") {
                    Some(a) => a.split_whitespace().map(String::from).collect(),
                    None => ExternalPesq::default_args(),
                };
                let pattern = kv.str("oracle.regex").unwrap_or(DEFAULT_SCORE_PATTERN).to_string();
                OracleSpec::ExternalPesq(ExternalPesq::new(exe, args, &pattern)?)
            }
            other => return Err(Error::Config(format!("unknown oracle kind `{other}`"))),
        })
    }

    pub fn oracle(&self) -> &(dyn QualityOracle + Sync) {
        match self {
            OracleSpec::ExternalPesq(o) => o,
            OracleSpec::SurrogateSnr(o) => o,
            OracleSpec::Constant(o) => o,
        }
    }
}

/// Scores `(degraded, reference)` pairs on at most `workers` threads.
/// Results keep the input order; a failed item does not stop the others.
pub fn batch_score(oracle: &(dyn QualityOracle + Sync), pairs: &[(Waveform, Waveform)], workers: usize) -> Result<Vec<pesqnet_core::Result<PesqScore>>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| pairs.par_iter().map(|(d, r)| oracle.score(d, r)).collect()))
}
