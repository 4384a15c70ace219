//! Training objectives.
//!
//! Spectral distances are accumulated over the two-sided DFT by Hermitian
//! symmetry: with `K` the DFT size, the DC bin and (for even `K`) the
//! Nyquist bin count once, all other stored bins twice, and the total is
//! divided by `L * K`. The one-sided toggle instead averages over the stored
//! `K/2 + 1` bins.
//!
//! Every loss comes in two forms: a plain function on values and a graph
//! builder used by training. Minibatch losses are the mean over utterances.

use alloc::vec::Vec;

use crate::autograd::{Graph, Unary, Var};
use crate::dsp::Spectrogram;
use crate::error::{bail, Result};
use crate::pesqnet::{PesqScore, PESQ_MAX};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the joint (dereverberation + denoising) term.
    pub alpha: f64,
    /// Target of the DNS fine-tuning loss.
    pub pesq_max: f64,
    /// Average over the stored bins instead of the two-sided DFT.
    pub one_sided: bool,
    /// Weight of an extra MSE term during DNS fine-tuning; zero disables it.
    pub mse_blend: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.9, pesq_max: PESQ_MAX, one_sided: false, mse_blend: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            bail!(Config, "alpha {} outside [0, 1]", self.alpha);
        }
        if !self.pesq_max.is_finite() {
            bail!(Config, "pesq_max must be finite");
        }
        if !(self.mse_blend >= 0.0 && self.mse_blend.is_finite()) {
            bail!(Config, "mse blend weight {} must be finite and non-negative", self.mse_blend);
        }
        Ok(())
    }
}

/// Per-bin weights, normalisation included, for `n_frames` frames of a
/// `fft_size`-point DFT.
pub fn bin_weights(n_frames: usize, n_bins: usize, fft_size: usize, one_sided: bool) -> Vec<f64> {
    if one_sided {
        return alloc::vec![1.0 / (n_frames * n_bins) as f64; n_bins];
    }
    let norm = 1.0 / (n_frames * fft_size) as f64;
    (0..n_bins).map(|k| if k == 0 || (fft_size.is_multiple_of(2) && k == fft_size / 2) { norm } else { 2.0 * norm }).collect()
}

fn weight_tensor(n_frames: usize, n_bins: usize, fft_size: usize, one_sided: bool) -> Tensor {
    let w = bin_weights(n_frames, n_bins, fft_size, one_sided);
    let data = (0..n_frames).flat_map(|_| w.iter().copied()).collect();
    Tensor::from_vec(&[n_frames, n_bins], data).expect("shape")
}

/// Weighted mean of `|est - target|^2`.
pub fn spectral_distance(est: &Spectrogram, target: &Spectrogram, one_sided: bool) -> Result<f64> {
    if !est.same_layout(target) {
        bail!(Shape, "spectrograms differ: {}x{} vs {}x{}", est.n_frames(), est.n_bins(), target.n_frames(), target.n_bins());
    }
    let w = bin_weights(est.n_frames(), est.n_bins(), est.config().fft_size, one_sided);
    let bins = est.n_bins();
    Ok(est.data().iter().zip(target.data()).enumerate().map(|(i, (a, b))| w[i % bins] * (a - b).norm_sqr()).sum())
}

/// Joint dereverberation and denoising loss against the clean target.
pub fn joint_loss(est: &Spectrogram, clean: &Spectrogram, cfg: &LossConfig) -> Result<f64> {
    spectral_distance(est, clean, cfg.one_sided)
}

/// Denoising-only loss against the reverberant clean target.
pub fn noise_loss(est: &Spectrogram, reverberant: &Spectrogram, cfg: &LossConfig) -> Result<f64> {
    spectral_distance(est, reverberant, cfg.one_sided)
}

/// `alpha * joint + (1 - alpha) * noise`.
pub fn mse_loss(est: &Spectrogram, clean: &Spectrogram, reverberant: &Spectrogram, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(combine(cfg.alpha, joint_loss(est, clean, cfg)?, noise_loss(est, reverberant, cfg)?))
}

fn combine(alpha: f64, joint: f64, noise: f64) -> f64 {
    if alpha == 1.0 {
        joint
    } else if alpha == 0.0 {
        noise
    } else {
        alpha * joint + (1.0 - alpha) * noise
    }
}

/// Squared error of a predicted score.
pub fn pesq_loss(est: PesqScore, truth: PesqScore) -> f64 {
    let d = est.value() - truth.value();
    d * d
}

/// Squared distance of a predicted score from `cfg.pesq_max`.
pub fn pesqnet_dns_loss(est: PesqScore, cfg: &LossConfig) -> f64 {
    let d = est.value() - cfg.pesq_max;
    d * d
}

/// Arithmetic mean of per-utterance losses.
pub fn batch_mean(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        bail!(InvalidInput, "empty minibatch");
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Graph form of [`spectral_distance`] for an estimate held as `(L, bins)`
/// real and imaginary parts.
pub fn spectral_distance_graph(g: &mut Graph, est_re: Var, est_im: Var, target: &Spectrogram, one_sided: bool) -> Result<Var> {
    let shape = [target.n_frames(), target.n_bins()];
    if g.shape(est_re) != shape || g.shape(est_im) != shape {
        bail!(Shape, "estimate {:?} vs target {:?}", g.shape(est_re), shape);
    }
    let (tre, tim) = target.parts();
    let (tre, tim) = (g.constant(tre), g.constant(tim));
    let dre = g.sub(est_re, tre)?;
    let dim = g.sub(est_im, tim)?;
    let sre = g.unary(dre, Unary::Square);
    let sim = g.unary(dim, Unary::Square);
    let err = g.add(sre, sim)?;
    g.weighted_sum(err, weight_tensor(shape[0], shape[1], target.config().fft_size, one_sided))
}

/// Graph form of [`mse_loss`].
pub fn mse_loss_graph(g: &mut Graph, est_re: Var, est_im: Var, clean: &Spectrogram, reverberant: &Spectrogram, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if cfg.alpha == 1.0 {
        return spectral_distance_graph(g, est_re, est_im, clean, cfg.one_sided);
    }
    if cfg.alpha == 0.0 {
        return spectral_distance_graph(g, est_re, est_im, reverberant, cfg.one_sided);
    }
    let joint = spectral_distance_graph(g, est_re, est_im, clean, cfg.one_sided)?;
    let noise = spectral_distance_graph(g, est_re, est_im, reverberant, cfg.one_sided)?;
    let joint = g.scale(joint, cfg.alpha);
    let noise = g.scale(noise, 1.0 - cfg.alpha);
    g.add(joint, noise)
}

/// `(score - target)^2` for a `(1, 1)` score node.
pub fn squared_error_graph(g: &mut Graph, score: Var, target: f64) -> Result<Var> {
    if g.value(score).len() != 1 {
        bail!(Shape, "score node must hold one value, got {:?}", g.shape(score));
    }
    let d = g.offset(score, -target);
    let sq = g.unary(d, Unary::Square);
    Ok(g.sum(sq))
}

/// Graph form of [`pesq_loss`].
pub fn pesq_loss_graph(g: &mut Graph, score: Var, truth: PesqScore) -> Result<Var> {
    squared_error_graph(g, score, truth.value())
}

/// Graph form of [`pesqnet_dns_loss`].
pub fn pesqnet_dns_loss_graph(g: &mut Graph, score: Var, cfg: &LossConfig) -> Result<Var> {
    squared_error_graph(g, score, cfg.pesq_max)
}

/// Mean of scalar loss nodes.
pub fn batch_mean_graph(g: &mut Graph, losses: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = losses.split_first() else {
        bail!(InvalidInput, "empty minibatch");
    };
    let mut total = first;
    for &l in rest {
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / losses.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{StftConfig, Window};
    use crate::rng::Rng;
    use num_complex::Complex64;

    fn cfg16() -> StftConfig {
        // 16 stored bins.
        StftConfig { frame_length: 16, hop: 8, fft_size: 30, window: Window::PeriodicHann }
    }

    fn random_spec(rng: &mut Rng, frames: usize) -> Spectrogram {
        let c = cfg16();
        let data = (0..frames * c.n_bins()).map(|_| Complex64::new(rng.normal(), rng.normal())).collect();
        Spectrogram::new(data, frames, c, 8 * frames).unwrap()
    }

    fn loop_distance(a: &Spectrogram, b: &Spectrogram) -> f64 {
        let k = a.config().fft_size;
        let mut acc = 0.0;
        for l in 0..a.n_frames() {
            // Rebuild the full two-sided spectrum of the difference.
            for kk in 0..k {
                let (src, conj) = if kk < a.n_bins() { (kk, false) } else { (k - kk, true) };
                let mut d = a.get(l, src) - b.get(l, src);
                if conj {
                    d = d.conj();
                }
                acc += d.norm_sqr();
            }
        }
        acc / (a.n_frames() * k) as f64
    }

    #[test]
    fn matches_two_sided_loop() {
        let mut rng = Rng::new(1);
        for frames in [1, 8] {
            let (a, b) = (random_spec(&mut rng, frames), random_spec(&mut rng, frames));
            let lc = LossConfig::default();
            assert!((joint_loss(&a, &b, &lc).unwrap() - loop_distance(&a, &b)).abs() < 1e-12);
        }
        // Even DFT size: Nyquist bin counted once.
        let c = StftConfig { frame_length: 16, hop: 8, fft_size: 32, window: Window::PeriodicHann };
        let data = |rng: &mut Rng| (0..4 * 17).map(|_| Complex64::new(rng.normal(), rng.normal())).collect();
        let a = Spectrogram::new(data(&mut rng), 4, c, 32).unwrap();
        let b = Spectrogram::new(data(&mut rng), 4, c, 32).unwrap();
        let mut acc = 0.0;
        for l in 0..4 {
            for k in 0..32 {
                let kk = if k <= 16 { k } else { 32 - k };
                acc += (a.get(l, kk) - b.get(l, kk)).norm_sqr();
            }
        }
        assert!((spectral_distance(&a, &b, false).unwrap() - acc / 128.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_extremes_and_blend() {
        let mut rng = Rng::new(2);
        let (e, s, r) = (random_spec(&mut rng, 5), random_spec(&mut rng, 5), random_spec(&mut rng, 5));
        let mut lc = LossConfig { alpha: 1.0, ..Default::default() };
        assert_eq!(mse_loss(&e, &s, &r, &lc).unwrap(), joint_loss(&e, &s, &lc).unwrap());
        lc.alpha = 0.0;
        assert_eq!(mse_loss(&e, &s, &r, &lc).unwrap(), noise_loss(&e, &r, &lc).unwrap());
        assert!((combine(0.9, 1.0, 2.0) - 1.1).abs() < 1e-15);
        assert_eq!(joint_loss(&e, &e, &lc).unwrap(), 0.0);
        lc.alpha = 1.5;
        assert!(mse_loss(&e, &s, &r, &lc).is_err());
    }

    #[test]
    fn score_losses() {
        let lc = LossConfig::default();
        let p = |v| PesqScore::new(v).unwrap();
        assert_eq!(pesqnet_dns_loss(p(4.64), &lc), 0.0);
        assert!((pesqnet_dns_loss(p(2.64), &lc) - 4.0).abs() < 1e-12);
        assert!((pesqnet_dns_loss(p(1.04), &lc) - 12.96).abs() < 1e-12);
        assert!((pesq_loss(p(3.0), p(2.5)) - 0.25).abs() < 1e-15);
        assert_eq!(batch_mean(&[1.0, 2.0, 6.0]).unwrap(), 3.0);
        assert!(batch_mean(&[]).is_err());
    }

    #[test]
    fn graph_matches_values() {
        let mut rng = Rng::new(3);
        let (e, s, r) = (random_spec(&mut rng, 6), random_spec(&mut rng, 6), random_spec(&mut rng, 6));
        let lc = LossConfig::default();
        let mut g = Graph::new();
        let (re, im) = e.parts();
        let (re, im) = (g.variable(re), g.variable(im));
        let v = mse_loss_graph(&mut g, re, im, &s, &r, &lc).unwrap();
        assert!((g.value(v).item() - mse_loss(&e, &s, &r, &lc).unwrap()).abs() < 1e-12);
        let mismatched = random_spec(&mut rng, 5);
        assert!(spectral_distance_graph(&mut g, re, im, &mismatched, false).is_err());
    }

    #[test]
    fn one_sided_toggle_averages_stored_bins() {
        let mut rng = Rng::new(4);
        let (a, b) = (random_spec(&mut rng, 3), random_spec(&mut rng, 3));
        let direct: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>() / (3 * 16) as f64;
        assert!((spectral_distance(&a, &b, true).unwrap() - direct).abs() < 1e-12);
    }
}
