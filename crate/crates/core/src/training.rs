//! Training curriculum: DNS pre-training, PESQNet pre-training with the DNS
//! frozen, first-stage fine-tuning, and the alternating joint fine-tuning
//! where exactly one network learns per epoch.
//!
//! In DNS epochs the enhancement network minimises the squared distance of
//! the frozen PESQNet's score from `pesq_max`, the gradient flowing through
//! the PESQNet into the mask. In PESQNet epochs the DNS is frozen and the
//! PESQNet regresses the oracle score of the current enhanced outputs. After
//! every epoch the DNS is scored on held-out data with the oracle.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::autograd::Graph;
use crate::dns::DnsModel;
use crate::dsp::{istft, stft, Spectrogram, Waveform};
use crate::error::{bail, Error, Result};
use crate::losses::{batch_mean, mse_loss, mse_loss_graph, pesq_loss, pesq_loss_graph, pesqnet_dns_loss_graph, LossConfig};
use crate::nn::{accumulate_grads, Adam, AdamConfig, ParamStore};
use crate::oracle::{QualityOracle, ScoreCache};
use crate::pesqnet::{PesqNet, PesqScore, Variant};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One training example: noisy mixture, clean speech and reverberant clean
/// speech, all of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub y: Waveform,
    pub s: Waveform,
    pub s_rev: Waveform,
}

impl Utterance {
    pub fn new(id: impl Into<String>, y: Waveform, s: Waveform, s_rev: Waveform) -> Result<Self> {
        let id = id.into();
        if y.len() != s.len() || y.len() != s_rev.len() {
            bail!(InvalidInput, "utterance {}: lengths {}, {}, {}", id, y.len(), s.len(), s_rev.len());
        }
        if y.sample_rate_hz() != s.sample_rate_hz() || y.sample_rate_hz() != s_rev.sample_rate_hz() {
            bail!(InvalidInput, "utterance {}: mixed sample rates", id);
        }
        Ok(Self { id, y, s, s_rev })
    }
}

/// Spectra computed once per utterance.
struct Prepared<'a> {
    utt: &'a Utterance,
    y: Spectrogram,
    s: Spectrogram,
    s_rev: Spectrogram,
    s_mag: Tensor,
}

fn prepare<'a>(dns: &DnsModel, data: &'a [Utterance]) -> Result<Vec<Prepared<'a>>> {
    let cfg = &dns.config().stft;
    data.iter()
        .map(|utt| {
            let s = stft(&utt.s, cfg)?;
            Ok(Prepared { utt, y: stft(&utt.y, cfg)?, s_mag: s.magnitude(), s, s_rev: stft(&utt.s_rev, cfg)? })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    DnsPretrain,
    PesqNetPretrain,
    FinetuneStage1,
    FinetuneStage2,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dns-pretrain" | "dns_pretrain" => Stage::DnsPretrain,
            "pesqnet-pretrain" | "pesqnet_pretrain" => Stage::PesqNetPretrain,
            "ft1" | "finetune_stage1" => Stage::FinetuneStage1,
            "ft2" | "finetune_stage2" => Stage::FinetuneStage2,
            _ => bail!(Config, "unknown training stage `{}`", s),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::DnsPretrain => "dns-pretrain",
            Stage::PesqNetPretrain => "pesqnet-pretrain",
            Stage::FinetuneStage1 => "ft1",
            Stage::FinetuneStage2 => "ft2",
        }
    }
}

/// Which network learns in an epoch of the joint fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    TrainDns,
    TrainPesqNet,
}

/// Epoch-level switch. Epochs count from one; with `dns_on_odd` the DNS
/// learns in odd epochs and the PESQNet in even ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlternationSchedule {
    pub dns_on_odd: bool,
}

impl Default for AlternationSchedule {
    fn default() -> Self {
        Self { dns_on_odd: true }
    }
}

impl AlternationSchedule {
    pub fn phase(&self, epoch: usize) -> Phase {
        if (epoch % 2 == 1) == self.dns_on_odd {
            Phase::TrainDns
        } else {
            Phase::TrainPesqNet
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dns_optimizer: AdamConfig,
    pub pesqnet_optimizer: AdamConfig,
    pub loss: LossConfig,
    pub variant: Variant,
    pub schedule: AlternationSchedule,
    /// Joint fine-tuning stops after this many DNS epochs without held-out
    /// improvement; zero disables early stopping.
    pub early_stop_patience: usize,
    /// Largest tolerated fraction of failed oracle calls per epoch.
    pub max_oracle_failure_rate: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::DnsPretrain,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            dns_optimizer: AdamConfig::default(),
            pesqnet_optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            variant: Variant::NonIntrusive,
            schedule: AlternationSchedule::default(),
            early_stop_patience: 5,
            max_oracle_failure_rate: 0.1,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            bail!(Config, "epochs and batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.max_oracle_failure_rate) {
            bail!(Config, "oracle failure rate {} outside [0, 1]", self.max_oracle_failure_rate);
        }
        self.loss.validate()
    }
}

/// Per-epoch losses of a pre-training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DnsTrainResult {
    /// Parameters of the best-validation epoch (the last epoch without
    /// validation data).
    pub params: ParamStore,
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub steps: u64,
}

#[derive(Clone, Debug)]
pub struct PesqNetTrainResult {
    pub params: ParamStore,
    pub curve: Vec<EpochLoss>,
    /// Final score-prediction MSE on the validation set, or on the training
    /// set without validation data.
    pub prediction_mse: f64,
    pub predictions: Vec<f64>,
    pub steps: u64,
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(alloc::format!("{what} is {v}; aborting")))
    }
}

fn scale_grads(grads: &mut BTreeMap<String, Tensor>, c: f64) {
    for t in grads.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= c);
    }
}

fn epoch_order(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx
}

/// Combined MSE loss of the current DNS on one utterance.
fn dns_mse_value(dns: &DnsModel, params: &ParamStore, p: &Prepared, loss: &LossConfig) -> Result<f64> {
    let est = dns.enhance_spectrum(params, &p.y)?;
    mse_loss(&est, &p.s, &p.s_rev, loss)
}

/// Mean combined MSE loss of `params` over `data`.
pub fn dns_validation_loss(dns: &DnsModel, params: &ParamStore, data: &[Utterance], loss: &LossConfig) -> Result<f64> {
    let prepared = prepare(dns, data)?;
    let losses = prepared.iter().map(|p| dns_mse_value(dns, params, p, loss)).collect::<Result<Vec<_>>>()?;
    batch_mean(&losses)
}

fn dns_mse_grads(dns: &DnsModel, params: &ParamStore, p: &Prepared, loss: &LossConfig) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, true);
    let out = dns.forward(&mut g, &b, &p.y)?;
    let l = mse_loss_graph(&mut g, out.enhanced_re, out.enhanced_im, &p.s, &p.s_rev, loss)?;
    let v = check_finite(g.value(l).item(), "DNS loss")?;
    let grads = g.backward(l)?;
    Ok((v, b.gradients(&g, &grads)))
}

/// Minimises the combined MSE loss. `on_epoch` sees every finished epoch.
pub fn pretrain_dns(
    dns: &DnsModel,
    init: ParamStore,
    train: &[Utterance],
    validation: &[Utterance],
    cfg: &TrainRunConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<DnsTrainResult> {
    cfg.validate()?;
    if train.is_empty() {
        bail!(InvalidInput, "empty training set");
    }
    let prepared = prepare(dns, train)?;
    let val = prepare(dns, validation)?;
    let mut rng = Rng::new(cfg.seed);
    let mut opt = Adam::new(cfg.dns_optimizer);
    let mut params = init;
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut losses = Vec::with_capacity(prepared.len());
        for batch in epoch_order(&mut rng, prepared.len()).chunks(cfg.batch_size) {
            let mut acc = BTreeMap::new();
            for &i in batch {
                let (v, grads) = dns_mse_grads(dns, &params, &prepared[i], &cfg.loss)?;
                losses.push(v);
                accumulate_grads(&mut acc, grads);
            }
            scale_grads(&mut acc, 1.0 / batch.len() as f64);
            opt.step(&mut params, &acc)?;
        }
        opt.end_epoch();
        let train_loss = batch_mean(&losses)?;
        let validation = if val.is_empty() {
            None
        } else {
            let v = val.iter().map(|p| dns_mse_value(dns, &params, p, &cfg.loss)).collect::<Result<Vec<_>>>()?;
            Some(check_finite(batch_mean(&v)?, "DNS validation loss")?)
        };
        let row = EpochLoss { epoch, train: train_loss, validation };
        on_epoch(&row);
        curve.push(row);
        let score = validation.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score <= *b) {
            best = Some((score, params.clone(), epoch));
        }
    }
    let (_, params, best_epoch) = best.expect("at least one epoch");
    Ok(DnsTrainResult { params, curve, best_epoch, steps: opt.steps() })
}

/// Oracle truth for one enhanced utterance; the clean speech is the
/// reference.
fn enhanced_waveform(dns: &DnsModel, params: &ParamStore, p: &Prepared) -> Result<(Spectrogram, Waveform)> {
    let est = dns.enhance_spectrum(params, &p.y)?;
    let wave = istft(&est, p.utt.y.sample_rate_hz())?;
    Ok((est, wave))
}

/// PESQNet training example: enhanced amplitude, the clean amplitude if
/// the variant is intrusive, and the oracle score.
struct Target {
    enhanced: Tensor,
    reference: Option<Tensor>,
    truth: PesqScore,
}

/// Counts the clean-reference spectrograms handed to the PESQNet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReferenceUsage {
    pub pesqnet_calls: usize,
    pub with_reference: usize,
}

impl ReferenceUsage {
    fn record(&mut self, reference: bool) {
        self.pesqnet_calls += 1;
        self.with_reference += usize::from(reference);
    }
}

fn reference_for(net: &PesqNet, p: &Prepared) -> Option<Tensor> {
    net.variant().is_intrusive().then(|| p.s_mag.clone())
}

fn build_targets(
    dns: &DnsModel,
    dns_params: &ParamStore,
    net: &PesqNet,
    data: &[Prepared],
    oracle: &dyn QualityOracle,
    cache: &mut ScoreCache,
    max_failure_rate: f64,
) -> Result<Vec<Option<Target>>> {
    let fp = dns_params.fingerprint();
    let mut failures = 0usize;
    let mut last_err = None;
    let mut out = Vec::with_capacity(data.len());
    for p in data {
        let (est, wave) = enhanced_waveform(dns, dns_params, p)?;
        match cache.get_or_score(oracle, &p.utt.id, fp, &wave, &p.utt.s) {
            Ok(truth) => out.push(Some(Target { enhanced: est.magnitude(), reference: reference_for(net, p), truth })),
            Err(e) => {
                failures += 1;
                last_err = Some(e);
                out.push(None);
            }
        }
    }
    if !data.is_empty() && failures as f64 / data.len() as f64 > max_failure_rate {
        bail!(
            OracleUnavailable,
            "{} of {} oracle calls failed (limit {}); last error: {}",
            failures,
            data.len(),
            max_failure_rate,
            last_err.map(|e| alloc::format!("{e}")).unwrap_or_default()
        );
    }
    Ok(out)
}

fn pesqnet_grads(net: &PesqNet, params: &ParamStore, t: &Target, usage: &mut ReferenceUsage) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, true);
    let e = g.constant(t.enhanced.clone());
    let r = t.reference.as_ref().map(|r| g.constant(r.clone()));
    usage.record(r.is_some());
    let out = net.forward(&mut g, &b, e, r)?;
    let l = pesq_loss_graph(&mut g, out.score, t.truth)?;
    let v = check_finite(g.value(l).item(), "PESQNet loss")?;
    let grads = g.backward(l)?;
    Ok((v, b.gradients(&g, &grads)))
}

fn predict(net: &PesqNet, params: &ParamStore, t: &Target, usage: &mut ReferenceUsage) -> Result<PesqScore> {
    usage.record(t.reference.is_some());
    net.score(params, &t.enhanced, t.reference.as_ref())
}

/// One pass over `targets`; returns the mean loss.
fn pesqnet_epoch(net: &PesqNet, params: &mut ParamStore, opt: &mut Adam, targets: &[Option<Target>], batch_size: usize, rng: &mut Rng, usage: &mut ReferenceUsage) -> Result<f64> {
    let valid: Vec<&Target> = targets.iter().flatten().collect();
    if valid.is_empty() {
        bail!(OracleUnavailable, "no oracle scores available for PESQNet training");
    }
    let mut losses = Vec::with_capacity(valid.len());
    for batch in epoch_order(rng, valid.len()).chunks(batch_size) {
        let mut acc = BTreeMap::new();
        for &i in batch {
            let (v, grads) = pesqnet_grads(net, params, valid[i], usage)?;
            losses.push(v);
            accumulate_grads(&mut acc, grads);
        }
        scale_grads(&mut acc, 1.0 / batch.len() as f64);
        opt.step(params, &acc)?;
    }
    opt.end_epoch();
    batch_mean(&losses)
}

fn prediction_mse(net: &PesqNet, params: &ParamStore, targets: &[Option<Target>], usage: &mut ReferenceUsage) -> Result<(f64, Vec<f64>)> {
    let mut preds = Vec::new();
    let mut losses = Vec::new();
    for t in targets.iter().flatten() {
        let est = predict(net, params, t, usage)?;
        preds.push(est.value());
        losses.push(pesq_loss(est, t.truth));
    }
    Ok((batch_mean(&losses)?, preds))
}

/// Fits the PESQNet to oracle scores of the frozen DNS's outputs.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_pesqnet(
    net: &PesqNet,
    init: ParamStore,
    dns: &DnsModel,
    dns_params: &ParamStore,
    train: &[Utterance],
    validation: &[Utterance],
    oracle: &dyn QualityOracle,
    cfg: &TrainRunConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<PesqNetTrainResult> {
    cfg.validate()?;
    check_variant(net, cfg)?;
    if train.is_empty() {
        bail!(InvalidInput, "empty training set");
    }
    let mut cache = ScoreCache::new();
    let prepared = prepare(dns, train)?;
    let val = prepare(dns, validation)?;
    let targets = build_targets(dns, dns_params, net, &prepared, oracle, &mut cache, cfg.max_oracle_failure_rate)?;
    let val_targets = build_targets(dns, dns_params, net, &val, oracle, &mut cache, cfg.max_oracle_failure_rate)?;
    let mut rng = Rng::new(cfg.seed);
    let mut opt = Adam::new(cfg.pesqnet_optimizer);
    let mut params = init;
    let mut usage = ReferenceUsage::default();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let train_loss = pesqnet_epoch(net, &mut params, &mut opt, &targets, cfg.batch_size, &mut rng, &mut usage)?;
        let validation = if val_targets.iter().any(Option::is_some) { Some(prediction_mse(net, &params, &val_targets, &mut usage)?.0) } else { None };
        let row = EpochLoss { epoch, train: train_loss, validation };
        on_epoch(&row);
        curve.push(row);
    }
    let eval = if val_targets.iter().any(Option::is_some) { &val_targets } else { &targets };
    let (prediction_mse, predictions) = prediction_mse(net, &params, eval, &mut usage)?;
    Ok(PesqNetTrainResult { params, curve, prediction_mse, predictions, steps: opt.steps() })
}

fn check_variant(net: &PesqNet, cfg: &TrainRunConfig) -> Result<()> {
    if net.variant() != cfg.variant {
        bail!(Config, "run configured for {:?} but the PESQNet is {:?}", cfg.variant, net.variant());
    }
    Ok(())
}

/// First-stage fine-tuning: both networks are trained again with their
/// pre-training losses on new data, the DNS first.
#[allow(clippy::too_many_arguments)]
pub fn finetune_stage1(
    dns: &DnsModel,
    dns_params: ParamStore,
    net: &PesqNet,
    net_params: ParamStore,
    train: &[Utterance],
    validation: &[Utterance],
    oracle: &dyn QualityOracle,
    cfg: &TrainRunConfig,
) -> Result<(DnsTrainResult, PesqNetTrainResult)> {
    let d = pretrain_dns(dns, dns_params, train, validation, cfg, |_| {})?;
    let p = pretrain_pesqnet(net, net_params, dns, &d.params, train, validation, oracle, cfg, |_| {})?;
    Ok((d, p))
}

/// Mean oracle score of the DNS's enhanced held-out utterances.
pub fn heldout_score(dns: &DnsModel, params: &ParamStore, heldout: &[Utterance], oracle: &dyn QualityOracle) -> Result<f64> {
    let prepared = prepare(dns, heldout)?;
    heldout_score_prepared(dns, params, &prepared, oracle, &mut ScoreCache::new())
}

fn heldout_score_prepared(dns: &DnsModel, params: &ParamStore, data: &[Prepared], oracle: &dyn QualityOracle, cache: &mut ScoreCache) -> Result<f64> {
    let fp = params.fingerprint();
    let mut scores = Vec::with_capacity(data.len());
    for p in data {
        let (_, wave) = enhanced_waveform(dns, params, p)?;
        if let Ok(s) = cache.get_or_score(oracle, &p.utt.id, fp, &wave, &p.utt.s) {
            scores.push(s.value());
        }
    }
    if scores.is_empty() {
        bail!(OracleUnavailable, "no held-out utterance could be scored");
    }
    batch_mean(&scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TracePhase {
    /// The DNS before joint fine-tuning.
    Initial,
    Dns,
    PesqNet,
}

impl TracePhase {
    pub fn name(self) -> &'static str {
        match self {
            TracePhase::Initial => "init",
            TracePhase::Dns => "dns",
            TracePhase::PesqNet => "pesqnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "init" => TracePhase::Initial,
            "dns" => TracePhase::Dns,
            "pesqnet" => TracePhase::PesqNet,
            _ => bail!(InvalidInput, "unknown trace phase `{}`", s),
        })
    }
}

impl fmt::Display for TracePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One point of the score-versus-epoch trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub phase: TracePhase,
    pub heldout_score: f64,
    /// Mean training loss of the epoch; absent for the initial point.
    pub train_loss: Option<f64>,
}

/// Evidence for the exactly-one-learner rule of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochAudit {
    pub epoch: usize,
    pub phase: Phase,
    pub dns_fingerprint: (u64, u64),
    pub pesqnet_fingerprint: (u64, u64),
    pub dns_steps: (u64, u64),
    pub pesqnet_steps: (u64, u64),
}

impl EpochAudit {
    pub fn dns_changed(&self) -> bool {
        self.dns_fingerprint.0 != self.dns_fingerprint.1 || self.dns_steps.0 != self.dns_steps.1
    }

    pub fn pesqnet_changed(&self) -> bool {
        self.pesqnet_fingerprint.0 != self.pesqnet_fingerprint.1 || self.pesqnet_steps.0 != self.pesqnet_steps.1
    }

    /// The learner named by the phase changed and the other did not.
    pub fn exactly_one_learner(&self) -> bool {
        match self.phase {
            Phase::TrainDns => self.dns_changed() && !self.pesqnet_changed(),
            Phase::TrainPesqNet => self.pesqnet_changed() && !self.dns_changed(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct JointResult {
    pub dns_params: ParamStore,
    pub pesqnet_params: ParamStore,
    pub trace: Vec<TraceRow>,
    pub audits: Vec<EpochAudit>,
    pub reference_usage: ReferenceUsage,
    pub stopped_early: bool,
}

fn dns_pesq_grads(
    dns: &DnsModel,
    dns_params: &ParamStore,
    net: &PesqNet,
    net_params: &ParamStore,
    p: &Prepared,
    loss: &LossConfig,
    usage: &mut ReferenceUsage,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let bd = dns_params.bind(&mut g, true);
    let bp = net_params.bind(&mut g, false);
    let out = dns.forward(&mut g, &bd, &p.y)?;
    let mag = g.complex_abs(out.enhanced_re, out.enhanced_im)?;
    let reference = reference_for(net, p).map(|r| g.constant(r));
    usage.record(reference.is_some());
    let est = net.forward(&mut g, &bp, mag, reference)?;
    let mut l = pesqnet_dns_loss_graph(&mut g, est.score, loss)?;
    if loss.mse_blend > 0.0 {
        let mse = mse_loss_graph(&mut g, out.enhanced_re, out.enhanced_im, &p.s, &p.s_rev, loss)?;
        let mse = g.scale(mse, loss.mse_blend);
        l = g.add(l, mse)?;
    }
    let v = check_finite(g.value(l).item(), "DNS fine-tuning loss")?;
    let grads = g.backward(l)?;
    Ok((v, bd.gradients(&g, &grads)))
}

/// Alternating joint fine-tuning. `on_row` sees every trace row as soon as
/// it exists.
#[allow(clippy::too_many_arguments)]
pub fn finetune_joint(
    dns: &DnsModel,
    dns_params: ParamStore,
    net: &PesqNet,
    net_params: ParamStore,
    train: &[Utterance],
    heldout: &[Utterance],
    oracle: &dyn QualityOracle,
    cfg: &TrainRunConfig,
    mut on_row: impl FnMut(&TraceRow),
) -> Result<JointResult> {
    cfg.validate()?;
    check_variant(net, cfg)?;
    if train.is_empty() || heldout.is_empty() {
        bail!(InvalidInput, "joint fine-tuning needs training and held-out utterances");
    }
    let prepared = prepare(dns, train)?;
    let held = prepare(dns, heldout)?;
    let mut cache = ScoreCache::new();
    let mut rng = Rng::new(cfg.seed);
    let mut dns_opt = Adam::new(cfg.dns_optimizer);
    let mut net_opt = Adam::new(cfg.pesqnet_optimizer);
    let (mut dp, mut np) = (dns_params, net_params);
    let mut usage = ReferenceUsage::default();
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let mut audits = Vec::with_capacity(cfg.epochs);

    let initial = TraceRow { epoch: 0, phase: TracePhase::Initial, heldout_score: heldout_score_prepared(dns, &dp, &held, oracle, &mut cache)?, train_loss: None };
    on_row(&initial);
    trace.push(initial);
    let mut best = initial.heldout_score;
    let mut stale = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let phase = cfg.schedule.phase(epoch);
        let before = (dp.fingerprint(), np.fingerprint(), dns_opt.steps(), net_opt.steps());
        let train_loss = match phase {
            Phase::TrainDns => {
                let mut losses = Vec::with_capacity(prepared.len());
                for batch in epoch_order(&mut rng, prepared.len()).chunks(cfg.batch_size) {
                    let mut acc = BTreeMap::new();
                    for &i in batch {
                        let (v, grads) = dns_pesq_grads(dns, &dp, net, &np, &prepared[i], &cfg.loss, &mut usage)?;
                        losses.push(v);
                        accumulate_grads(&mut acc, grads);
                    }
                    scale_grads(&mut acc, 1.0 / batch.len() as f64);
                    dns_opt.step(&mut dp, &acc)?;
                }
                dns_opt.end_epoch();
                batch_mean(&losses)?
            }
            Phase::TrainPesqNet => {
                let targets = build_targets(dns, &dp, net, &prepared, oracle, &mut cache, cfg.max_oracle_failure_rate)?;
                pesqnet_epoch(net, &mut np, &mut net_opt, &targets, cfg.batch_size, &mut rng, &mut usage)?
            }
        };
        let audit = EpochAudit {
            epoch,
            phase,
            dns_fingerprint: (before.0, dp.fingerprint()),
            pesqnet_fingerprint: (before.1, np.fingerprint()),
            dns_steps: (before.2, dns_opt.steps()),
            pesqnet_steps: (before.3, net_opt.steps()),
        };
        if !audit.exactly_one_learner() {
            bail!(ScheduleViolation, "epoch {} ({:?}): both or neither network changed: {:?}", epoch, phase, audit);
        }
        audits.push(audit);
        let score = heldout_score_prepared(dns, &dp, &held, oracle, &mut cache)?;
        let row = TraceRow {
            epoch,
            phase: match phase {
                Phase::TrainDns => TracePhase::Dns,
                Phase::TrainPesqNet => TracePhase::PesqNet,
            },
            heldout_score: score,
            train_loss: Some(train_loss),
        };
        on_row(&row);
        trace.push(row);
        if phase == Phase::TrainDns && cfg.early_stop_patience > 0 {
            if score > best {
                best = score;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(JointResult { dns_params: dp, pesqnet_params: np, trace, audits, reference_usage: usage, stopped_early })
}
