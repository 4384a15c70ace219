//! Mask-estimating enhancement network.
//!
//! A convolutional encoder halves the frequency axis at every stage, an LSTM
//! runs over time on the flattened bottleneck, and a decoder with skip
//! connections restores the frequency resolution. The head emits a magnitude
//! logit `a` and a phase `phi` per time-frequency bin, and the mask is
//! `M = tanh(a) * e^{j phi}`, so `|M| <= 1` holds by construction.
//!
//! Tensors are laid out as `(N, C, F, T)`: batch, channels, frequency bins,
//! frames. The spectrogram's `K/2 + 1` bins are zero-padded up to
//! `input_bins` on the way in and the padding is dropped on the way out.

use alloc::format;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::autograd::{same_padding, Graph, Unary, Var};
use crate::dsp::{istft, stft, Spectrogram, StftConfig, Waveform};
use crate::error::{bail, Result};
use crate::nn::{init_conv, init_linear, init_lstm, Activation, Binding, ParamStore};
use crate::rng::Rng;

/// How the head's two maps become a bounded complex mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskActivation {
    /// `tanh(a) * e^{j phi}`.
    TanhMagnitudePhase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DnsConfig {
    pub encoder_channels: Vec<usize>,
    pub recurrent_units: usize,
    /// Frequency bins after padding; divisible by `2^stages`.
    pub input_bins: usize,
    pub kernel_freq: usize,
    pub kernel_time: usize,
    pub activation: Activation,
    pub mask_activation: MaskActivation,
    pub stft: StftConfig,
}

impl Default for DnsConfig {
    fn default() -> Self {
        Self {
            encoder_channels: alloc::vec![16, 32],
            recurrent_units: 64,
            input_bins: 260,
            kernel_freq: 5,
            kernel_time: 1,
            activation: Activation::LeakyRelu(0.2),
            mask_activation: MaskActivation::TanhMagnitudePhase,
            stft: StftConfig::default(),
        }
    }
}

impl DnsConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            bail!(Config, "encoder channels {:?}", self.encoder_channels);
        }
        if self.recurrent_units == 0 || self.kernel_freq == 0 || self.kernel_time == 0 {
            bail!(Config, "recurrent units and kernel sizes must be positive");
        }
        let factor = 1usize << self.encoder_channels.len();
        if !self.input_bins.is_multiple_of(factor) {
            bail!(Config, "input bins {} not divisible by {}", self.input_bins, factor);
        }
        if self.input_bins < self.stft.n_bins() {
            bail!(Config, "input bins {} below the {} spectrogram bins", self.input_bins, self.stft.n_bins());
        }
        Ok(())
    }

    fn bottleneck_bins(&self) -> usize {
        self.input_bins >> self.encoder_channels.len()
    }
}

/// Complex mask with `|M| <= 1` everywhere, `n_frames x n_bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpectrogram {
    data: Vec<Complex64>,
    n_frames: usize,
    n_bins: usize,
}

impl MaskSpectrogram {
    /// Rounding slack allowed on `|M| <= 1`.
    pub const BOUND_TOLERANCE: f64 = 1e-12;

    pub fn new(data: Vec<Complex64>, n_frames: usize, n_bins: usize) -> Result<Self> {
        if data.len() != n_frames * n_bins {
            bail!(Shape, "{} mask values for {}x{}", data.len(), n_frames, n_bins);
        }
        if let Some(i) = data.iter().position(|m| !(m.norm() <= 1.0 + Self::BOUND_TOLERANCE)) {
            bail!(OutOfRange, "mask magnitude {} at index {}", data[i].norm(), i);
        }
        Ok(Self { data, n_frames, n_bins })
    }

    pub fn constant(value: Complex64, n_frames: usize, n_bins: usize) -> Result<Self> {
        Self::new(alloc::vec![value; n_frames * n_bins], n_frames, n_bins)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().fold(0.0, |m, c| m.max(c.norm()))
    }
}

/// `S_hat = Y * M`, elementwise.
pub fn apply_mask(y: &Spectrogram, m: &MaskSpectrogram) -> Result<Spectrogram> {
    if y.n_frames() != m.n_frames || y.n_bins() != m.n_bins {
        bail!(Shape, "spectrogram {}x{} with mask {}x{}", y.n_frames(), y.n_bins(), m.n_frames, m.n_bins);
    }
    y.with_data(y.data().iter().zip(&m.data).map(|(a, b)| a * b).collect())
}

/// Mask and enhanced spectrum as graph nodes, each `(L, K/2+1)`.
pub struct DnsOutput {
    pub mask_re: Var,
    pub mask_im: Var,
    pub enhanced_re: Var,
    pub enhanced_im: Var,
}

/// The enhancement network: configuration plus the layer wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct DnsModel {
    config: DnsConfig,
}

impl DnsModel {
    pub fn new(config: DnsConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &DnsConfig {
        &self.config
    }

    fn decoder_out(&self, stage: usize) -> usize {
        self.config.encoder_channels[stage.max(1) - 1]
    }

    /// Fresh parameters. With `zero_head` the output convolution starts at
    /// zero, so the initial mask is `tanh(0) = 0` everywhere.
    pub fn init_params(&self, rng: &mut Rng, zero_head: bool) -> ParamStore {
        let c = &self.config;
        let (kf, kt) = (c.kernel_freq, c.kernel_time);
        let mut store = ParamStore::new();
        let mut inp = 2;
        for (i, &ch) in c.encoder_channels.iter().enumerate() {
            init_conv(&mut store, rng, &format!("enc{i}"), ch, inp, kf, kt);
            inp = ch;
        }
        let flat = inp * c.bottleneck_bins();
        init_lstm(&mut store, rng, "bottleneck.lstm", c.recurrent_units, flat);
        init_linear(&mut store, rng, "bottleneck.proj", flat, c.recurrent_units);
        for (i, &ch) in c.encoder_channels.iter().enumerate().rev() {
            init_conv(&mut store, rng, &format!("dec{i}"), self.decoder_out(i), inp + ch, kf, kt);
            inp = self.decoder_out(i);
        }
        init_conv(&mut store, rng, "head", 2, inp, kf, kt);
        if zero_head {
            for name in ["head.weight", "head.bias"] {
                store.get_mut(name).expect("head").data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        store
    }

    /// Records the forward pass for noisy spectrum `y`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, y: &Spectrogram) -> Result<DnsOutput> {
        let c = &self.config;
        let (l, bins) = (y.n_frames(), y.n_bins());
        if bins > c.input_bins {
            bail!(Shape, "{} bins exceed the network's {} input bins", bins, c.input_bins);
        }
        let (yre, yim) = y.parts();
        let (yre, yim) = (g.constant(yre), g.constant(yim));
        let pad = c.input_bins - bins;
        let mut chans = Vec::with_capacity(2);
        for part in [yre, yim] {
            let v = g.pad(part, 1, 0, pad)?;
            chans.push(g.reshape(v, &[1, 1, l, c.input_bins])?);
        }
        let x = g.concat(&chans, 1)?;
        let mut h = g.permute(x, &[0, 1, 3, 2])?;

        let pad2 = same_padding(c.kernel_freq, c.kernel_time);
        let mut skips = Vec::with_capacity(c.encoder_channels.len());
        for i in 0..c.encoder_channels.len() {
            h = self.conv(g, p, &format!("enc{i}"), h, true)?;
            skips.push(h);
            h = g.max_pool2d(h, 2, 1)?;
        }

        let ch = *c.encoder_channels.last().expect("validated");
        let fb = c.bottleneck_bins();
        let seq = g.permute(h, &[0, 3, 1, 2])?;
        let seq = g.reshape(seq, &[1, l, ch * fb])?;
        let r = g.lstm(seq, p.get("bottleneck.lstm.w_ih")?, p.get("bottleneck.lstm.w_hh")?, p.get("bottleneck.lstm.bias")?, false)?;
        let r = g.reshape(r, &[l, c.recurrent_units])?;
        let r = g.linear(r, p.get("bottleneck.proj.weight")?, Some(p.get("bottleneck.proj.bias")?))?;
        let r = c.activation.apply(g, r);
        let r = g.reshape(r, &[1, l, ch, fb])?;
        h = g.permute(r, &[0, 2, 3, 1])?;

        for i in (0..c.encoder_channels.len()).rev() {
            h = g.upsample(h, 2, 1)?;
            h = g.concat(&[h, skips[i]], 1)?;
            h = self.conv(g, p, &format!("dec{i}"), h, true)?;
        }
        let out = g.conv2d(h, p.get("head.weight")?, Some(p.get("head.bias")?), pad2)?;
        let out = g.slice(out, 2, 0, bins)?;
        let out = g.permute(out, &[0, 1, 3, 2])?;
        let logit = g.slice(out, 1, 0, 1)?;
        let logit = g.reshape(logit, &[l, bins])?;
        let phase = g.slice(out, 1, 1, 1)?;
        let phase = g.reshape(phase, &[l, bins])?;

        let mag = match c.mask_activation {
            MaskActivation::TanhMagnitudePhase => g.tanh(logit),
        };
        let cos = g.unary(phase, Unary::Cos);
        let sin = g.unary(phase, Unary::Sin);
        let mask_re = g.mul(mag, cos)?;
        let mask_im = g.mul(mag, sin)?;
        let (enhanced_re, enhanced_im) = complex_mul_const(g, yre, yim, mask_re, mask_im)?;
        Ok(DnsOutput { mask_re, mask_im, enhanced_re, enhanced_im })
    }

    fn conv(&self, g: &mut Graph, p: &Binding, name: &str, x: Var, act: bool) -> Result<Var> {
        let pad = same_padding(self.config.kernel_freq, self.config.kernel_time);
        let y = g.conv2d(x, p.get(&format!("{name}.weight"))?, Some(p.get(&format!("{name}.bias"))?), pad)?;
        Ok(if act { self.config.activation.apply(g, y) } else { y })
    }

    /// Mask for noisy spectrum `y`.
    pub fn mask(&self, params: &ParamStore, y: &Spectrogram) -> Result<MaskSpectrogram> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let out = self.forward(&mut g, &b, y)?;
        let data = g.value(out.mask_re).data().iter().zip(g.value(out.mask_im).data()).map(|(&re, &im)| Complex64::new(re, im)).collect();
        MaskSpectrogram::new(data, y.n_frames(), y.n_bins())
    }

    /// Enhanced spectrum `Y * M`.
    pub fn enhance_spectrum(&self, params: &ParamStore, y: &Spectrogram) -> Result<Spectrogram> {
        apply_mask(y, &self.mask(params, y)?)
    }

    /// Time-domain enhancement: STFT, mask, inverse STFT. The output has the
    /// input's length.
    pub fn enhance(&self, params: &ParamStore, y: &Waveform) -> Result<Waveform> {
        let spec = stft(y, &self.config.stft)?;
        istft(&self.enhance_spectrum(params, &spec)?, y.sample_rate_hz())
    }
}

/// `(a + jb)(c + jd)` where `a, b` do not need gradients.
pub fn complex_mul_const(g: &mut Graph, a: Var, b: Var, c: Var, d: Var) -> Result<(Var, Var)> {
    let ac = g.mul(a, c)?;
    let bd = g.mul(b, d)?;
    let ad = g.mul(a, d)?;
    let bc = g.mul(b, c)?;
    Ok((g.sub(ac, bd)?, g.add(ad, bc)?))
}

/// Free-function form of [`DnsModel::mask`].
pub fn dns_forward(y: &Spectrogram, params: &ParamStore, cfg: &DnsConfig) -> Result<MaskSpectrogram> {
    DnsModel::new(cfg.clone())?.mask(params, y)
}

/// Free-function form of [`DnsModel::enhance`].
pub fn enhance(y: &Waveform, params: &ParamStore, cfg: &DnsConfig) -> Result<Waveform> {
    DnsModel::new(cfg.clone())?.enhance(params, y)
}

/// Magnitude-logit bias that saturates `tanh` to exactly one in `f64`.
pub const SATURATING_LOGIT: f64 = 30.0;

/// Parameters whose mask is exactly `1 + 0j`: zero head weights, saturated
/// magnitude bias, zero phase bias.
pub fn identity_mask_params(model: &DnsModel, rng: &mut Rng) -> ParamStore {
    let mut p = model.init_params(rng, true);
    p.get_mut("head.bias").expect("head").data_mut()[0] = SATURATING_LOGIT;
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn small() -> DnsConfig {
        DnsConfig { encoder_channels: alloc::vec![3, 4], recurrent_units: 5, ..Default::default() }
    }

    fn noisy(seed: u64, n: usize) -> Waveform {
        let mut rng = Rng::new(seed);
        Waveform::new((0..n).map(|_| 0.3 * rng.normal()).collect(), 16_000).unwrap()
    }

    #[test]
    fn mask_is_bounded_and_shaped() {
        let model = DnsModel::new(small()).unwrap();
        let mut rng = Rng::new(1);
        let mut p = model.init_params(&mut rng, false);
        // Push the head to large values so the bound is actually exercised.
        p.get_mut("head.bias").unwrap().data_mut()[0] = 4.0;
        let y = stft(&noisy(2, 3000), &model.config().stft).unwrap();
        let m = model.mask(&p, &y).unwrap();
        assert_eq!((m.n_frames(), m.n_bins()), (y.n_frames(), 257));
        assert!(m.max_magnitude() <= 1.0 + MaskSpectrogram::BOUND_TOLERANCE);
        let s = apply_mask(&y, &m).unwrap();
        for (a, b) in s.data().iter().zip(y.data()) {
            assert!(a.norm() <= b.norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn zero_head_gives_zero_mask() {
        let model = DnsModel::new(small()).unwrap();
        let p = model.init_params(&mut Rng::new(3), true);
        let y = stft(&noisy(4, 2000), &model.config().stft).unwrap();
        let m = model.mask(&p, &y).unwrap();
        assert!(m.data().iter().all(|c| c.re == 0.0 && c.im == 0.0));
        let out = model.enhance(&p, &noisy(4, 2000)).unwrap();
        assert!(out.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DnsModel::new(small()).unwrap();
        let p = model.init_params(&mut Rng::new(5), false);
        let y = stft(&noisy(6, 2500), &model.config().stft).unwrap();
        let a = model.mask(&p, &y).unwrap();
        let b = model.mask(&p, &y).unwrap();
        assert_eq!(a, b);
        let p2 = model.init_params(&mut Rng::new(5), false);
        assert_eq!(p, p2);
    }

    #[test]
    fn identity_mask_enhances_to_input() {
        let model = DnsModel::new(small()).unwrap();
        let p = identity_mask_params(&model, &mut Rng::new(0));
        let y = noisy(7, 4000);
        let m = model.mask(&p, &stft(&y, &model.config().stft).unwrap()).unwrap();
        assert!(m.data().iter().all(|c| *c == Complex64::new(1.0, 0.0)));
        let out = model.enhance(&p, &y).unwrap();
        assert_eq!(out.len(), y.len());
        for i in 1..y.len() {
            assert!((out.samples()[i] - y.samples()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn apply_mask_examples() {
        let cfg = StftConfig::default();
        let y = Spectrogram::new(alloc::vec![Complex64::new(2.0, 0.0); 257], 1, cfg, 384).unwrap();
        let m = MaskSpectrogram::constant(Complex64::from_polar(0.5, core::f64::consts::FRAC_PI_2), 1, 257).unwrap();
        let s = apply_mask(&y, &m).unwrap();
        for c in s.data() {
            assert!((c.norm() - 1.0).abs() < 1e-15);
            assert!((c.arg() - core::f64::consts::FRAC_PI_2).abs() < 1e-15);
        }
        let one = MaskSpectrogram::constant(Complex64::new(1.0, 0.0), 1, 257).unwrap();
        assert_eq!(apply_mask(&y, &one).unwrap(), y);
        let zero = MaskSpectrogram::constant(Complex64::new(0.0, 0.0), 1, 257).unwrap();
        assert!(apply_mask(&y, &zero).unwrap().data().iter().all(|c| c.norm() == 0.0));
        let wrong = MaskSpectrogram::constant(Complex64::new(1.0, 0.0), 2, 257).unwrap();
        assert!(apply_mask(&y, &wrong).is_err());
        assert!(MaskSpectrogram::constant(Complex64::new(1.0, 0.1), 1, 1).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.input_bins = 258;
        assert!(DnsModel::new(c).is_err());
        let mut c = small();
        c.encoder_channels = alloc::vec![4, 4, 4];
        assert!(DnsModel::new(c).is_err());
        let mut c = small();
        c.input_bins = 256;
        assert!(DnsModel::new(c).is_err());
    }
}
