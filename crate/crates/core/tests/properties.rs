//! Invariants of the public API under random inputs.

use pesqnet_core::dns::{apply_mask, MaskSpectrogram};
use pesqnet_core::dsp::{istft, stft, Complex64, StftConfig, Waveform};
use pesqnet_core::losses::{mse_loss, spectral_distance, LossConfig};
use pesqnet_core::metrics::{seg_snr, SegSnrConfig};
use pesqnet_core::pesqnet::{blockify, score_gate, PesqScore, PESQ_MAX, PESQ_MIN};
use pesqnet_core::Tensor;
use proptest::prelude::*;

fn waveform(samples: Vec<f64>) -> Waveform {
    Waveform::new(samples, 16_000).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_restores_the_interior(samples in prop::collection::vec(-1.0f64..1.0, 800..3000)) {
        let cfg = StftConfig::default();
        let x = waveform(samples.clone());
        let y = istft(&stft(&x, &cfg).unwrap(), 16_000).unwrap();
        prop_assert_eq!(y.len(), samples.len());
        let interior = cfg.frame_length..samples.len().saturating_sub(cfg.frame_length);
        for (a, b) in y.samples()[interior.clone()].iter().zip(&samples[interior]) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bounded_masks_never_amplify(
        samples in prop::collection::vec(-1.0f64..1.0, 400..1200),
        polar in prop::collection::vec((0.0f64..=1.0, -3.2f64..3.2), 1..8),
    ) {
        let y = stft(&waveform(samples), &StftConfig::default()).unwrap();
        let data: Vec<Complex64> = (0..y.data().len()).map(|i| {
            let (r, phi) = polar[i % polar.len()];
            Complex64::from_polar(r, phi)
        }).collect();
        let m = MaskSpectrogram::new(data, y.n_frames(), y.n_bins()).unwrap();
        let s = apply_mask(&y, &m).unwrap();
        for (a, b) in s.data().iter().zip(y.data()) {
            prop_assert!(a.norm() <= b.norm() * (1.0 + 1e-12) + 1e-300);
        }
    }

    #[test]
    fn distances_are_non_negative_and_zero_on_self(a in prop::collection::vec(-1.0f64..1.0, 500), b in prop::collection::vec(-1.0f64..1.0, 500), alpha in 0.0f64..=1.0) {
        let cfg = StftConfig::default();
        let (sa, sb) = (stft(&waveform(a), &cfg).unwrap(), stft(&waveform(b), &cfg).unwrap());
        prop_assert_eq!(spectral_distance(&sa, &sa, false).unwrap(), 0.0);
        prop_assert!(spectral_distance(&sa, &sb, false).unwrap() >= 0.0);
        let lc = LossConfig { alpha, ..Default::default() };
        prop_assert!(mse_loss(&sa, &sb, &sb, &lc).unwrap() >= 0.0);
    }

    #[test]
    fn gate_stays_in_range(z in -1e6f64..1e6) {
        let v = score_gate(z);
        prop_assert!((PESQ_MIN..=PESQ_MAX).contains(&v));
        prop_assert!(PesqScore::new(v).is_ok());
    }

    #[test]
    fn scores_outside_the_range_are_rejected(v in prop_oneof![-10.0f64..1.0399, 4.6401f64..10.0]) {
        prop_assert!(PesqScore::new(v).is_err());
    }

    #[test]
    fn blocks_cover_every_frame(frames in 1usize..70, width in 1usize..20) {
        let t = Tensor::from_vec(&[frames, 3], (0..frames * 3).map(|i| i as f64 + 1.0).collect()).unwrap();
        let blocks = blockify(&[&t], 4, width).unwrap();
        prop_assert_eq!(blocks.n_blocks(), frames.div_ceil(width));
    }

    #[test]
    fn segmental_snr_is_gain_invariant(clean in prop::collection::vec(-1.0f64..1.0, 600..2000), noise in prop::collection::vec(-0.3f64..0.3, 2000), gain in 0.01f64..100.0) {
        let cfg = SegSnrConfig::default();
        let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(c, n)| c + n).collect();
        let a = seg_snr(&noisy, &clean, &cfg).unwrap();
        let scale = |v: &[f64]| v.iter().map(|x| x * gain).collect::<Vec<_>>();
        let b = seg_snr(&scale(&noisy), &scale(&clean), &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}
