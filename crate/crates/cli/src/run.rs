//! Training runs driven by a flat key-value config file.
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `stage` | `dns-pretrain`, `pesqnet-pretrain`, `ft1`, `ft2` | required |
//! | `manifest` | dataset manifest | required |
//! | `train_split`, `heldout_split` | manifest splits | `train`, `val` |
//! | `epochs`, `batch_size`, `seed` | loop settings | 10, 4, 0 |
//! | `sample_rate` | expected WAV rate | 16000 |
//! | `dns.lr`, `dns.lr_decay`, `dns.clip_norm` | DNS Adam | 1e-3, 1, 5 |
//! | `pesqnet.lr`, `pesqnet.lr_decay`, `pesqnet.clip_norm` | PESQNet Adam | 1e-3, 1, 5 |
//! | `loss.alpha`, `loss.pesq_max`, `loss.one_sided`, `loss.mse_blend` | objectives | 0.9, 4.64, false, 0 |
//! | `schedule.dns_on_odd` | DNS learns in odd epochs | true |
//! | `early_stop_patience` | DNS epochs without improvement | 5 |
//! | `max_oracle_failure_rate` | abort threshold | 0.1 |
//! | `dns_checkpoint`, `pesqnet_checkpoint` | inputs | stage dependent |
//! | `out_dns`, `out_pesqnet` | outputs | stage dependent |
//! | `trace` | CSV trace (an SVG plot is written next to it) | none |
//! | `dns.*`, `stft.*`, `pesqnet.*` | architecture of fresh models | defaults |
//! | `oracle.*` | truth source, see [`crate::oracles::OracleSpec`] | surrogate |

use std::path::{Path, PathBuf};

use log::info;
use pesqnet_core::dns::DnsModel;
use pesqnet_core::losses::LossConfig;
use pesqnet_core::nn::{AdamConfig, ParamStore};
use pesqnet_core::pesqnet::PesqNet;
use pesqnet_core::rng::Rng;
use pesqnet_core::training::{finetune_joint, finetune_stage1, pretrain_dns, pretrain_pesqnet, AlternationSchedule, Stage, TrainRunConfig, Utterance};

use crate::checkpoint::{dns_config_from_kv, pesqnet_config_from_kv, Checkpoint};
use crate::datasets::load_split_strict;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::manifest::{Manifest, Split};
use crate::oracles::OracleSpec;
use crate::trace::{trace_to_svg, TraceWriter};

fn adam(kv: &KeyValues, prefix: &str) -> Result<AdamConfig> {
    let d = AdamConfig::default();
    Ok(AdamConfig {
        learning_rate: kv.get_or(&format!("{prefix}.lr"), d.learning_rate)?,
        decay: kv.get_or(&format!("{prefix}.lr_decay"), d.decay)?,
        clip_norm: kv.get_or(&format!("{prefix}.clip_norm"), d.clip_norm)?,
        ..d
    })
}

/// The run settings of a config file.
pub fn train_run_config(kv: &KeyValues) -> Result<TrainRunConfig> {
    let d = TrainRunConfig::default();
    let ld = LossConfig::default();
    let variant = pesqnet_config_from_kv(kv)?.variant;
    let cfg = TrainRunConfig {
        stage: Stage::parse(kv.require("stage")?)?,
        epochs: kv.get_or("epochs", d.epochs)?,
        batch_size: kv.get_or("batch_size", d.batch_size)?,
        seed: kv.get_or("seed", d.seed)?,
        dns_optimizer: adam(kv, "dns")?,
        pesqnet_optimizer: adam(kv, "pesqnet")?,
        loss: LossConfig {
            alpha: kv.get_or("loss.alpha", ld.alpha)?,
            pesq_max: kv.get_or("loss.pesq_max", ld.pesq_max)?,
            one_sided: kv.get_or("loss.one_sided", ld.one_sided)?,
            mse_blend: kv.get_or("loss.mse_blend", ld.mse_blend)?,
        },
        variant,
        schedule: AlternationSchedule { dns_on_odd: kv.get_or("schedule.dns_on_odd", true)? },
        early_stop_patience: kv.get_or("early_stop_patience", d.early_stop_patience)?,
        max_oracle_failure_rate: kv.get_or("max_oracle_failure_rate", d.max_oracle_failure_rate)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn path_key(kv: &KeyValues, key: &str, base: &Path) -> Option<PathBuf> {
    kv.str(key).map(|p| base.join(p))
}

fn require_path(kv: &KeyValues, key: &str, base: &Path, stage: Stage) -> Result<PathBuf> {
    path_key(kv, key, base).ok_or_else(|| Error::Config(format!("stage {} needs `{key}`", stage.name())))
}

fn load_dns(path: &Path) -> Result<(DnsModel, ParamStore)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.dns()?, ck.params))
}

fn load_pesqnet(path: &Path) -> Result<(PesqNet, ParamStore)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.pesqnet()?, ck.params))
}

fn save(ck: Checkpoint, run: &KeyValues, path: &Path) -> Result<()> {
    let mut ck = ck;
    for (k, v) in run.raw() {
        ck.config.insert(format!("run.{k}"), v.clone());
    }
    ck.save(path)?;
    info!("wrote {}", path.display());
    Ok(())
}

/// What a finished run produced.
#[derive(Debug, Default)]
pub struct RunOutputs {
    pub dns_checkpoint: Option<PathBuf>,
    pub pesqnet_checkpoint: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

/// Runs the stage described by the config file at `config_path`. Relative
/// paths in the file resolve against its directory.
pub fn run_training(config_path: &Path) -> Result<RunOutputs> {
    let kv = KeyValues::read(config_path)?;
    let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
    run_training_kv(&kv, &base)
}

pub fn run_training_kv(kv: &KeyValues, base: &Path) -> Result<RunOutputs> {
    let cfg = train_run_config(kv)?;
    let stage = cfg.stage;
    let sample_rate: u32 = kv.get_or("sample_rate", pesqnet_core::dsp::SAMPLE_RATE_HZ)?;
    let manifest = Manifest::read(&require_path(kv, "manifest", base, stage)?)?;
    let train_split: Split = kv.get_or("train_split", Split::Train)?;
    let heldout_split: Split = kv.get_or("heldout_split", Split::Val)?;
    let oracle = OracleSpec::from_kv(kv)?;
    let dns_in = path_key(kv, "dns_checkpoint", base);
    let net_in = path_key(kv, "pesqnet_checkpoint", base);
    let dns_out = path_key(kv, "out_dns", base);
    let net_out = path_key(kv, "out_pesqnet", base);
    let trace_path = path_key(kv, "trace", base);
    let fresh_dns = dns_config_from_kv(kv)?;
    let fresh_net = pesqnet_config_from_kv(kv)?;
    kv.finish()?;

    let train: Vec<Utterance> = load_split_strict(&manifest, train_split, cfg.seed, sample_rate)?;
    let heldout: Vec<Utterance> = load_split_strict(&manifest, heldout_split, cfg.seed, sample_rate)?;
    info!("stage {}: {} training and {} held-out utterances, oracle {}", stage.name(), train.len(), heldout.len(), oracle.oracle().name());
    let mut rng = Rng::new(cfg.seed);
    let need = |p: &Option<PathBuf>, key: &str| p.clone().ok_or_else(|| Error::Config(format!("stage {} needs `{key}`", stage.name())));
    let mut outputs = RunOutputs::default();

    match stage {
        Stage::DnsPretrain => {
            let (model, init) = match &dns_in {
                Some(p) => load_dns(p)?,
                None => {
                    let m = DnsModel::new(fresh_dns)?;
                    let p = m.init_params(&mut rng, false);
                    (m, p)
                }
            };
            let out = need(&dns_out, "out_dns")?;
            let r = pretrain_dns(&model, init, &train, &heldout, &cfg, |e| info!("epoch {}: train {:.6} validation {:?}", e.epoch, e.train, e.validation))?;
            info!("best epoch {}", r.best_epoch);
            save(Checkpoint::for_dns(&model, r.params), kv, &out)?;
            outputs.dns_checkpoint = Some(out);
        }
        Stage::PesqNetPretrain => {
            let (dns, dp) = load_dns(&need(&dns_in, "dns_checkpoint")?)?;
            let (net, init) = match &net_in {
                Some(p) => load_pesqnet(p)?,
                None => {
                    let n = PesqNet::new(fresh_net)?;
                    let p = n.init_params(&mut rng);
                    (n, p)
                }
            };
            let out = need(&net_out, "out_pesqnet")?;
            let r = pretrain_pesqnet(&net, init, &dns, &dp, &train, &heldout, oracle.oracle(), &cfg, |e| {
                info!("epoch {}: train {:.6} validation {:?}", e.epoch, e.train, e.validation)
            })?;
            info!("score prediction MSE {:.6}", r.prediction_mse);
            save(Checkpoint::for_pesqnet(&net, r.params), kv, &out)?;
            outputs.pesqnet_checkpoint = Some(out);
        }
        Stage::FinetuneStage1 | Stage::FinetuneStage2 => {
            let (dns, dp) = load_dns(&need(&dns_in, "dns_checkpoint")?)?;
            let (net, np) = load_pesqnet(&need(&net_in, "pesqnet_checkpoint")?)?;
            let (d_out, n_out) = (need(&dns_out, "out_dns")?, need(&net_out, "out_pesqnet")?);
            let (dp, np) = if stage == Stage::FinetuneStage1 {
                let (d, p) = finetune_stage1(&dns, dp, &net, np, &train, &heldout, oracle.oracle(), &cfg)?;
                (d.params, p.params)
            } else {
                let mut writer = trace_path.as_deref().map(TraceWriter::create).transpose()?;
                let mut write_err = None;
                let r = finetune_joint(&dns, dp, &net, np, &train, &heldout, oracle.oracle(), &cfg, |row| {
                    info!("epoch {} ({}): held-out {:.4} loss {:?}", row.epoch, row.phase, row.heldout_score, row.train_loss);
                    if let Some(w) = writer.as_mut() {
                        if let Err(e) = w.append(row) {
                            write_err.get_or_insert(e);
                        }
                    }
                })?;
                if let Some(e) = write_err {
                    return Err(e);
                }
                if let Some(p) = &trace_path {
                    let svg = p.with_extension("svg");
                    std::fs::write(&svg, trace_to_svg(&r.trace)?).map_err(|e| Error::io(&svg, e))?;
                    outputs.trace = Some(p.clone());
                }
                (r.dns_params, r.pesqnet_params)
            };
            save(Checkpoint::for_dns(&dns, dp), kv, &d_out)?;
            save(Checkpoint::for_pesqnet(&net, np), kv, &n_out)?;
            outputs.dns_checkpoint = Some(d_out);
            outputs.pesqnet_checkpoint = Some(n_out);
        }
    }
    Ok(outputs)
}
