//! PESQ-estimating network.
//!
//! An utterance's amplitude spectrogram is cut into blocks of `W` frames and
//! `K_in` bins. Each block runs through parallel convolution branches whose
//! kernels differ in time width, max pooling, a max-over-time pooling down to
//! a short fixed-length sequence, and a bidirectional LSTM over that
//! sequence. The final forward and backward states describe the block; the
//! average, standard deviation, minimum and maximum of those descriptors over
//! all blocks feed fully connected layers and a single output unit squashed
//! to `[1.04, 4.64]` by `3.6 * sigmoid(z) + 1.04`.
//!
//! Three variants share that main path:
//! * non-intrusive: one input channel, the enhanced spectrogram;
//! * early fusion: enhanced and clean reference as two input channels;
//! * middle fusion: a second branch stack fed with `|S| - |S_hat|` ends in a
//!   sigmoid, and its output multiplies the main features elementwise right
//!   before the BLSTM.
//!
//! Every block is processed independently of the others up to the
//! statistics, which use exactly rounded sums; repeating the whole block
//! sequence therefore leaves the score bit-identical.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::autograd::{same_padding, Graph, Unary, Var};
use crate::error::{bail, Result};
use crate::nn::{init_conv, init_linear, init_lstm, Activation, Binding, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PESQ_MIN: f64 = 1.04;
pub const PESQ_MAX: f64 = 4.64;
const PESQ_SPAN: f64 = 3.6;

/// A score on the PESQ MOS-LQO scale, `1.04 <= value <= 4.64`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct PesqScore(f64);

impl PesqScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(PESQ_MIN..=PESQ_MAX).contains(&value) {
            bail!(OutOfRange, "PESQ score {} outside [{}, {}]", value, PESQ_MIN, PESQ_MAX);
        }
        Ok(Self(value))
    }

    /// Clamps any finite value into range.
    pub fn saturating(value: f64) -> Result<Self> {
        if value.is_nan() {
            bail!(OutOfRange, "PESQ score is NaN");
        }
        Ok(Self(value.clamp(PESQ_MIN, PESQ_MAX)))
    }

    pub fn max() -> Self {
        Self(PESQ_MAX)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for PesqScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}", self.0)
    }
}

/// Output gate `3.6 * sigmoid(z) + 1.04`, kept inside `[1.04, 4.64]` despite
/// rounding at saturation.
pub fn score_gate(z: f64) -> f64 {
    (PESQ_SPAN * crate::autograd::sigmoid(z) + PESQ_MIN).clamp(PESQ_MIN, PESQ_MAX)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    NonIntrusive,
    EarlyFusion,
    MiddleFusion,
}

impl Variant {
    pub fn is_intrusive(self) -> bool {
        !matches!(self, Variant::NonIntrusive)
    }

    /// Input channels of the main branch.
    pub fn channels(self) -> usize {
        match self {
            Variant::EarlyFusion => 2,
            _ => 1,
        }
    }

    /// Short name: `ni`, `ef` or `mf`.
    pub fn short_name(self) -> &'static str {
        match self {
            Variant::NonIntrusive => "ni",
            Variant::EarlyFusion => "ef",
            Variant::MiddleFusion => "mf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ni" | "non_intrusive" | "non-intrusive" => Variant::NonIntrusive,
            "ef" | "ef_intrusive" | "ef-intrusive" => Variant::EarlyFusion,
            "mf" | "mf_intrusive" | "mf-intrusive" => Variant::MiddleFusion,
            _ => bail!(Config, "unknown PESQNet variant `{}`", s),
        })
    }
}

/// What happens to a final block shorter than `W` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockPadding {
    ZeroPad,
}

/// One convolution + max-pool stage of a branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub filters: usize,
    pub pool_freq: usize,
    pub pool_time: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PesqNetConfig {
    pub variant: Variant,
    pub input_bins: usize,
    pub block_width: usize,
    /// Time widths of the parallel branches' kernels.
    pub kernel_widths: Vec<usize>,
    /// Frequency height of every kernel.
    pub kernel_height: usize,
    pub stages: Vec<ConvStage>,
    /// Sequence length left after max pooling over time.
    pub time_steps: usize,
    pub blstm_units: usize,
    pub fc_sizes: Vec<usize>,
    pub activation: Activation,
    pub block_padding: BlockPadding,
}

impl Default for PesqNetConfig {
    fn default() -> Self {
        Self {
            variant: Variant::NonIntrusive,
            input_bins: 260,
            block_width: 16,
            kernel_widths: alloc::vec![1, 2, 4, 8],
            kernel_height: 3,
            stages: alloc::vec![ConvStage { filters: 32, pool_freq: 2, pool_time: 2 }, ConvStage { filters: 32, pool_freq: 2, pool_time: 1 },],
            time_steps: 4,
            blstm_units: 128,
            fc_sizes: alloc::vec![64],
            activation: Activation::Elu,
            block_padding: BlockPadding::ZeroPad,
        }
    }
}

impl PesqNetConfig {
    pub fn input_channels(&self) -> usize {
        self.variant.channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_bins == 0 || self.block_width == 0 || self.blstm_units == 0 || self.time_steps == 0 {
            bail!(Config, "input bins, block width, BLSTM units and time steps must be positive");
        }
        if self.kernel_widths.is_empty() || self.kernel_widths.contains(&0) || self.kernel_height == 0 {
            bail!(Config, "kernel widths {:?}, height {}", self.kernel_widths, self.kernel_height);
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.filters == 0 || s.pool_freq == 0 || s.pool_time == 0) {
            bail!(Config, "conv stages {:?}", self.stages);
        }
        if self.fc_sizes.contains(&0) {
            bail!(Config, "fully connected sizes {:?}", self.fc_sizes);
        }
        let pf: usize = self.stages.iter().map(|s| s.pool_freq).product();
        let pt: usize = self.stages.iter().map(|s| s.pool_time).product();
        if !self.input_bins.is_multiple_of(pf) {
            bail!(Config, "input bins {} not divisible by the frequency pooling {}", self.input_bins, pf);
        }
        if !self.block_width.is_multiple_of(pt) || !(self.block_width / pt).is_multiple_of(self.time_steps) {
            bail!(Config, "block width {} incompatible with time pooling {} and {} steps", self.block_width, pt, self.time_steps);
        }
        Ok(())
    }

    fn pooled_bins(&self) -> usize {
        self.input_bins / self.stages.iter().map(|s| s.pool_freq).product::<usize>()
    }

    fn pooled_frames(&self) -> usize {
        self.block_width / self.stages.iter().map(|s| s.pool_time).product::<usize>()
    }

    /// Per-step feature width entering the BLSTM.
    pub fn feature_dim(&self) -> usize {
        self.kernel_widths.len() * self.stages.last().map_or(0, |s| s.filters) * self.pooled_bins()
    }

    /// Blocks needed for `n_frames`.
    pub fn n_blocks(&self, n_frames: usize) -> usize {
        n_frames.div_ceil(self.block_width).max(1)
    }
}

/// Spectrogram blocks laid out `(B, C, K_in, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTensor {
    data: Tensor,
}

impl BlockTensor {
    pub fn n_blocks(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// Value at block `b`, bin `k`, frame-in-block `w`, channel `c`.
    pub fn get(&self, b: usize, k: usize, w: usize, c: usize) -> f64 {
        let s = self.data.shape();
        self.data.data()[((b * s[1] + c) * s[2] + k) * s[3] + w]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

fn check_channels(channels: &[&Tensor], input_bins: usize) -> Result<(usize, usize)> {
    let Some(first) = channels.first() else {
        bail!(InvalidInput, "no input spectrogram");
    };
    let s = first.shape();
    if s.len() != 2 || s[0] == 0 {
        bail!(Shape, "amplitude spectrogram must be (frames >= 1, bins), got {:?}", s);
    }
    if channels.iter().any(|c| c.shape() != s) {
        bail!(Shape, "channel spectrograms differ in shape");
    }
    if s[1] > input_bins {
        bail!(Shape, "{} bins exceed the {} input bins", s[1], input_bins);
    }
    Ok((s[0], s[1]))
}

/// Cuts `(L, bins)` amplitude spectrograms into zero-padded blocks of
/// `width` frames and `input_bins` bins. All channels share the partition.
pub fn blockify(channels: &[&Tensor], input_bins: usize, width: usize) -> Result<BlockTensor> {
    if width == 0 {
        bail!(Config, "block width must be positive");
    }
    let (l, bins) = check_channels(channels, input_bins)?;
    let nb = l.div_ceil(width);
    let c = channels.len();
    let mut data = Tensor::zeros(&[nb, c, input_bins, width]);
    let d = data.data_mut();
    for (ci, ch) in channels.iter().enumerate() {
        for frame in 0..l {
            let (b, w) = (frame / width, frame % width);
            for k in 0..bins {
                d[((b * c + ci) * input_bins + k) * width + w] = ch.data()[frame * bins + k];
            }
        }
    }
    Ok(BlockTensor { data })
}

/// Graph nodes of one PESQNet evaluation.
pub struct PesqNetOutput {
    /// Final pre-activation `z`, shape `(1, 1)`.
    pub logit: Var,
    /// Score `3.6 * sigmoid(z) + 1.04`, shape `(1, 1)`.
    pub score: Var,
    /// Middle-fusion gate `(B, steps, features)`, if any.
    pub gate: Option<Var>,
    /// Per-block descriptors `(B, 2H)` before the statistics.
    pub block_features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PesqNet {
    config: PesqNetConfig,
}

impl PesqNet {
    pub fn new(config: PesqNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &PesqNetConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn init_params(&self, rng: &mut Rng) -> ParamStore {
        let c = &self.config;
        let mut store = ParamStore::new();
        let mut prefixes = alloc::vec![("main", c.input_channels())];
        if c.variant == Variant::MiddleFusion {
            prefixes.push(("diff", 1));
        }
        for (prefix, channels) in prefixes {
            for (bi, &w) in c.kernel_widths.iter().enumerate() {
                let mut inp = channels;
                for (si, st) in c.stages.iter().enumerate() {
                    init_conv(&mut store, rng, &format!("{prefix}.b{bi}.conv{si}"), st.filters, inp, c.kernel_height, w);
                    inp = st.filters;
                }
            }
        }
        let d = c.feature_dim();
        init_lstm(&mut store, rng, "blstm.fwd", c.blstm_units, d);
        init_lstm(&mut store, rng, "blstm.bwd", c.blstm_units, d);
        let mut inp = 8 * c.blstm_units;
        for (i, &n) in c.fc_sizes.iter().enumerate() {
            init_linear(&mut store, rng, &format!("fc{i}"), n, inp);
            inp = n;
        }
        init_linear(&mut store, rng, "out", 1, inp);
        store
    }

    /// Blocks `(L, bins)` graph inputs into `(B, C, K_in, W)`.
    pub fn blockify_graph(&self, g: &mut Graph, channels: &[Var]) -> Result<Var> {
        let c = &self.config;
        let tensors: Vec<&Tensor> = channels.iter().map(|&v| g.value(v)).collect();
        let (l, bins) = check_channels(&tensors, c.input_bins)?;
        let nb = c.n_blocks(l);
        let mut blocks = Vec::with_capacity(channels.len());
        for &ch in channels {
            let v = g.pad(ch, 1, 0, c.input_bins - bins)?;
            let v = g.pad(v, 0, 0, nb * c.block_width - l)?;
            let v = g.reshape(v, &[nb, c.block_width, c.input_bins])?;
            let v = g.permute(v, &[0, 2, 1])?;
            blocks.push(g.reshape(v, &[nb, 1, c.input_bins, c.block_width])?);
        }
        if blocks.len() == 1 {
            Ok(blocks[0])
        } else {
            g.concat(&blocks, 1)
        }
    }

    /// Conv branches, pooling and max-over-time; `(B, C, K, W)` to
    /// `(B, steps, features)`.
    fn branch_stack(&self, g: &mut Graph, p: &Binding, prefix: &str, x: Var) -> Result<Var> {
        let c = &self.config;
        let nb = g.shape(x)[0];
        let mut outs = Vec::with_capacity(c.kernel_widths.len());
        for (bi, &w) in c.kernel_widths.iter().enumerate() {
            let mut h = x;
            for (si, st) in c.stages.iter().enumerate() {
                let name = format!("{prefix}.b{bi}.conv{si}");
                let wt = p.get(&format!("{name}.weight"))?;
                let bs = p.get(&format!("{name}.bias"))?;
                h = g.conv2d(h, wt, Some(bs), same_padding(c.kernel_height, w))?;
                h = c.activation.apply(g, h);
                h = g.max_pool2d(h, st.pool_freq, st.pool_time)?;
            }
            outs.push(g.max_pool2d(h, 1, c.pooled_frames() / c.time_steps)?);
        }
        let h = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let h = g.permute(h, &[0, 3, 1, 2])?;
        g.reshape(h, &[nb, c.time_steps, c.feature_dim()])
    }

    /// Middle-fusion gate from the difference spectrogram `|S| - |S_hat|`,
    /// `(L, bins)`. Every element lies in `[0, 1]`.
    pub fn gate(&self, g: &mut Graph, p: &Binding, diff: Var) -> Result<Var> {
        if self.config.variant != Variant::MiddleFusion {
            bail!(Config, "gate tensor exists only for the middle-fusion variant");
        }
        let x = self.blockify_graph(g, &[diff])?;
        let h = self.branch_stack(g, p, "diff", x)?;
        Ok(g.sigmoid(h))
    }

    /// Records the forward pass. `enhanced` and `reference` are `(L, bins)`
    /// amplitude spectrograms; `reference` is required exactly for the
    /// intrusive variants.
    pub fn forward(&self, g: &mut Graph, p: &Binding, enhanced: Var, reference: Option<Var>) -> Result<PesqNetOutput> {
        let c = &self.config;
        match (c.variant.is_intrusive(), reference) {
            (true, None) => bail!(InvalidInput, "{:?} PESQNet needs a clean reference", c.variant),
            (false, Some(_)) => bail!(InvalidInput, "non-intrusive PESQNet takes no reference"),
            _ => {}
        }
        if !g.value(enhanced).all_finite() || reference.is_some_and(|r| !g.value(r).all_finite()) {
            bail!(InvalidInput, "non-finite amplitude spectrogram");
        }
        if let Some(r) = reference {
            if g.shape(r) != g.shape(enhanced) {
                bail!(Shape, "reference {:?} vs enhanced {:?}", g.shape(r), g.shape(enhanced));
            }
        }
        let x = match (c.variant, reference) {
            (Variant::EarlyFusion, Some(r)) => self.blockify_graph(g, &[enhanced, r])?,
            _ => self.blockify_graph(g, &[enhanced])?,
        };
        let nb = g.shape(x)[0];
        let mut feats = self.branch_stack(g, p, "main", x)?;
        let gate = match (c.variant, reference) {
            (Variant::MiddleFusion, Some(r)) => {
                let diff = g.sub(r, enhanced)?;
                let gate = self.gate(g, p, diff)?;
                feats = g.mul(feats, gate)?;
                Some(gate)
            }
            _ => None,
        };

        let h = c.blstm_units;
        let s = c.time_steps;
        let fwd = g.lstm(feats, p.get("blstm.fwd.w_ih")?, p.get("blstm.fwd.w_hh")?, p.get("blstm.fwd.bias")?, false)?;
        let bwd = g.lstm(feats, p.get("blstm.bwd.w_ih")?, p.get("blstm.bwd.w_hh")?, p.get("blstm.bwd.bias")?, true)?;
        let last = g.slice(fwd, 1, s - 1, 1)?;
        let last = g.reshape(last, &[nb, h])?;
        let first = g.slice(bwd, 1, 0, 1)?;
        let first = g.reshape(first, &[nb, h])?;
        let block_features = g.concat(&[last, first], 1)?;

        let stats = g.block_stats(block_features)?;
        let mut z = g.reshape(stats, &[1, 8 * h])?;
        for i in 0..c.fc_sizes.len() {
            z = g.linear(z, p.get(&format!("fc{i}.weight"))?, Some(p.get(&format!("fc{i}.bias"))?))?;
            z = c.activation.apply(g, z);
        }
        let logit = g.linear(z, p.get("out.weight")?, Some(p.get("out.bias")?))?;
        let score = g.sigmoid(logit);
        let score = g.scale(score, PESQ_SPAN);
        let score = g.offset(score, PESQ_MIN);
        let score = g.unary(score, Unary::Clamp(PESQ_MIN, PESQ_MAX));
        Ok(PesqNetOutput { logit, score, gate, block_features })
    }

    /// Scores one utterance from amplitude spectrograms.
    pub fn score(&self, params: &ParamStore, enhanced: &Tensor, reference: Option<&Tensor>) -> Result<PesqScore> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let e = g.constant(enhanced.clone());
        let r = reference.map(|r| g.constant(r.clone()));
        let out = self.forward(&mut g, &b, e, r)?;
        PesqScore::new(g.value(out.score).item())
    }

    /// Gate tensor for a difference spectrogram, as values.
    pub fn gate_values(&self, params: &ParamStore, diff: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let d = g.constant(diff.clone());
        let gate = self.gate(&mut g, &b, d)?;
        Ok(g.value(gate).clone())
    }
}

/// Free-function form of [`PesqNet::score`].
pub fn pesqnet_forward(enhanced: &Tensor, reference: Option<&Tensor>, params: &ParamStore, cfg: &PesqNetConfig) -> Result<PesqScore> {
    PesqNet::new(cfg.clone())?.score(params, enhanced, reference)
}

/// Free-function form of [`PesqNet::gate_values`].
pub fn mf_gate(diff: &Tensor, params: &ParamStore, cfg: &PesqNetConfig) -> Result<Tensor> {
    PesqNet::new(cfg.clone())?.gate_values(params, diff)
}

/// Human-readable layer summary.
pub fn describe(cfg: &PesqNetConfig) -> String {
    format!(
        "{} PESQNet: {} ch x {} bins x {} frames, widths {:?}, stages {:?}, {} steps x {} features, BLSTM {}, FC {:?}",
        cfg.variant.short_name(),
        cfg.input_channels(),
        cfg.input_bins,
        cfg.block_width,
        cfg.kernel_widths,
        cfg.stages.iter().map(|s| (s.filters, s.pool_freq, s.pool_time)).collect::<Vec<_>>(),
        cfg.time_steps,
        cfg.feature_dim(),
        cfg.blstm_units,
        cfg.fc_sizes
    )
}
