use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pesqnet::checkpoint::Checkpoint;
use pesqnet::datasets::{generate_toy_corpus, ToyCorpusConfig};
use pesqnet::evaluate::{evaluate, EvalConfig, Method};
use pesqnet::kv::KeyValues;
use pesqnet::manifest::{Manifest, Split};
use pesqnet::oracles::OracleSpec;
use pesqnet::run::run_training_kv;
use pesqnet::wav::{read_wav, write_wav, WavFormat};
use pesqnet::{Error, Result};
use pesqnet_core::dsp::{stft, StftConfig, SAMPLE_RATE_HZ};
use pesqnet_core::metrics::SegSnrConfig;
use pesqnet_core::pesqnet::Variant;

#[derive(Parser)]
#[command(name = "pesqnet", version, about = "PESQNet-mediated deep noise suppression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Ni,
    Ef,
    Mf,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Ni => Variant::NonIntrusive,
            VariantArg::Ef => Variant::EarlyFusion,
            VariantArg::Mf => Variant::MiddleFusion,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "dns-pretrain")]
    DnsPretrain,
    #[value(name = "pesqnet-pretrain")]
    PesqnetPretrain,
    Ft1,
    Ft2,
}

impl StageArg {
    fn name(self) -> &'static str {
        match self {
            StageArg::DnsPretrain => "dns-pretrain",
            StageArg::PesqnetPretrain => "pesqnet-pretrain",
            StageArg::Ft1 => "ft1",
            StageArg::Ft2 => "ft2",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Enhance a noisy WAV file with a DNS checkpoint.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write 32-bit float samples instead of 16-bit.
        #[arg(long)]
        float: bool,
    },
    /// Estimate the PESQ score of a WAV file with a PESQNet checkpoint.
    Score {
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        degraded: PathBuf,
        /// Clean reference; required by the intrusive variants.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run a training stage from a flat key-value config file.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        config: PathBuf,
    },
    /// Report metrics of DNS checkpoints on a manifest split.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "dev")]
        split: Split,
        /// Comma-separated DNS checkpoints.
        #[arg(long, value_delimiter = ',')]
        models: Vec<PathBuf>,
        /// Report file; `.csv` or `.md`.
        #[arg(long)]
        out: PathBuf,
        /// Also report the unprocessed mixture.
        #[arg(long)]
        include_noisy: bool,
        /// Config file with `oracle.*` keys; the surrogate oracle otherwise.
        #[arg(long)]
        oracle_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a small synthetic corpus and its manifest.
    GenerateCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n_utts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Enhance { model, input, out, float } => {
            let ck = Checkpoint::load(&model)?;
            let dns = ck.dns()?;
            let y = read_wav(&input, SAMPLE_RATE_HZ)?;
            let s = dns.enhance(&ck.params, &y)?;
            write_wav(&out, &s, if float { WavFormat::Float32 } else { WavFormat::Pcm16 })?;
        }
        Command::Score { variant, model, degraded, reference } => {
            let ck = Checkpoint::load(&model)?;
            let net = ck.pesqnet()?;
            let variant = Variant::from(variant);
            if net.variant() != variant {
                return Err(Error::Config(format!("checkpoint holds a {:?} PESQNet, not {:?}", net.variant(), variant)));
            }
            if variant.is_intrusive() != reference.is_some() {
                return Err(Error::Config(format!("--reference is {} for the {} variant", if variant.is_intrusive() { "required" } else { "not accepted" }, variant.short_name())));
            }
            let cfg = StftConfig::default();
            let d = read_wav(&degraded, SAMPLE_RATE_HZ)?;
            let dm = stft(&d, &cfg)?.magnitude();
            let rm = match &reference {
                Some(r) => {
                    let r = read_wav(r, SAMPLE_RATE_HZ)?;
                    if r.len() != d.len() {
                        return Err(Error::Config(format!("reference has {} samples, degraded {}", r.len(), d.len())));
                    }
                    Some(stft(&r, &cfg)?.magnitude())
                }
                None => None,
            };
            println!("{}", net.score(&ck.params, &dm, rm.as_ref())?);
        }
        Command::Train { stage, config } => {
            let mut map: BTreeMap<String, String> = KeyValues::read(&config)?.raw().clone();
            map.insert("stage".into(), stage.name().into());
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let out = run_training_kv(&KeyValues::from_map(map), &base)?;
            for p in [out.dns_checkpoint, out.pesqnet_checkpoint, out.trace].into_iter().flatten() {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { manifest, split, models, out, include_noisy, oracle_config, seed } => {
            let m = Manifest::read(&manifest)?;
            let oracle = match oracle_config {
                Some(p) => OracleSpec::from_kv(&KeyValues::read(&p)?)?,
                None => OracleSpec::from_kv(&KeyValues::default())?,
            };
            let mut methods = Vec::new();
            if include_noisy {
                methods.push(Method::Noisy);
            }
            for p in &models {
                let ck = Checkpoint::load(p)?;
                methods.push(Method::Dns { name: stem(p), model: ck.dns()?, params: ck.params });
            }
            let cfg = EvalConfig { seed, sample_rate_hz: SAMPLE_RATE_HZ, seg_snr: SegSnrConfig::default() };
            let report = evaluate(&m, split, &methods, oracle.oracle(), &cfg)?;
            let text = match out.extension().and_then(|e| e.to_str()) {
                Some("csv") => report.to_csv(),
                Some("md") => report.to_markdown(),
                _ => return Err(Error::Config(format!("{}: report must end in .csv or .md", out.display()))),
            };
            std::fs::write(&out, text).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            for (method, utt, msg) in &report.failures {
                log::warn!("{method} / {utt}: {msg}");
            }
        }
        Command::GenerateCorpus { out, n_utts, seed, duration } => {
            let m = generate_toy_corpus(&out, &ToyCorpusConfig { n_utts, seed, duration_s: duration, ..Default::default() })?;
            println!("{} utterances in {}", m.entries.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
