//! In-place complex FFT: iterative radix-2 for powers of two, direct DFT
//! otherwise.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use num_complex::Complex64;

/// Forward transform, `X(k) = sum_n x(n) e^{-j 2 pi k n / N}`.
pub fn fft(buf: &mut [Complex64]) {
    transform(buf, false);
}

/// Unnormalised inverse transform (`N * ifft`).
pub fn ifft_unscaled(buf: &mut [Complex64]) {
    transform(buf, true);
}

fn transform(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if !n.is_power_of_two() {
        dft(buf, inverse);
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * TAU / len as f64;
        let twiddles: Vec<Complex64> = (0..half).map(|k| Complex64::from_polar(1.0, step * k as f64)).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn dft(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let input = buf.to_vec();
    for (k, out) in buf.iter_mut().enumerate() {
        *out = input.iter().enumerate().map(|(i, x)| x * Complex64::from_polar(1.0, sign * TAU * ((k * i) % n) as f64 / n as f64)).sum();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn radix2_matches_direct_dft() {
        let mut rng = Rng::new(1);
        for n in [2usize, 8, 64, 512] {
            let x: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.normal(), rng.normal())).collect();
            let mut fast = x.clone();
            fft(&mut fast);
            let mut slow = x.clone();
            dft(&mut slow, false);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-9 * n as f64);
            }
            ifft_unscaled(&mut fast);
            for (a, b) in fast.iter().zip(&x) {
                assert!((a / n as f64 - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn non_power_of_two_round_trips() {
        let mut x: Vec<Complex64> = (0..12).map(|i| Complex64::new(i as f64, 0.5)).collect();
        let orig = x.clone();
        fft(&mut x);
        ifft_unscaled(&mut x);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a / 12.0 - b).norm() < 1e-12);
        }
    }
}
