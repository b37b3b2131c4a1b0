//! Iterative radix-2 complex FFT with a small reusable plan.
//!
//! Only power-of-two sizes are supported, which is all the STFT and
//! convolution paths ever need. Twiddles are tabulated per plan so repeated
//! transforms of the same size (per-frame STFT, per-node convolution) pay
//! the trig cost once.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use num_complex::Complex64;

/// FFT plan for a fixed power-of-two size.
pub struct Fft {
    n: usize,
    // e^{-2*pi*i*k/n} for k in 0..n/2
    twiddles: Vec<Complex64>,
}

impl Fft {
    /// Panics if `n` is not a power of two (internal misuse, not input data).
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two() && n >= 2, "fft size must be a power of two, got {n}");
        let twiddles = (0..n / 2)
            .map(|k| {
                let ang = -2.0 * PI * k as f64 / n as f64;
                Complex64::new(libm::cos(ang), libm::sin(ang))
            })
            .collect();
        Fft { n, twiddles }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place forward DFT, no normalization.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, false);
    }

    /// In-place inverse DFT, scaled by 1/n.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, true);
        let scale = 1.0 / self.n as f64;
        for x in buf.iter_mut() {
            *x *= scale;
        }
    }

    fn transform(&self, buf: &mut [Complex64], invert: bool) {
        let n = self.n;
        assert_eq!(buf.len(), n, "buffer length {} does not match plan size {}", buf.len(), n);

        // bit-reversal permutation
        let mut j = 0usize;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                buf.swap(i, j);
            }
        }

        let mut len = 2usize;
        while len <= n {
            let stride = n / len;
            let half = len / 2;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * stride];
                    if invert {
                        w = w.conj();
                    }
                    let u = buf[start + k];
                    let v = buf[start + k + half] * w;
                    buf[start + k] = u + v;
                    buf[start + k + half] = u - v;
                }
            }
            len <<= 1;
        }
    }
}

/// Smallest power of two >= n.
pub fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Linear convolution of two real sequences via FFT, truncated to `out_len`.
pub fn convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    let full = a.len() + b.len() - 1;
    let n = next_pow2(full.max(2));
    let plan = Fft::new(n);

    let mut fa = vec![Complex64::new(0.0, 0.0); n];
    for (dst, &x) in fa.iter_mut().zip(a) {
        dst.re = x;
    }
    let mut fb = vec![Complex64::new(0.0, 0.0); n];
    for (dst, &x) in fb.iter_mut().zip(b) {
        dst.re = x;
    }
    plan.forward(&mut fa);
    plan.forward(&mut fb);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x *= y;
    }
    plan.inverse(&mut fa);
    fa.iter().take(out_len).map(|c| c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                (0..n)
                    .map(|t| {
                        let ang = -2.0 * PI * (k * t % n) as f64 / n as f64;
                        x[t] * Complex64::new(ang.cos(), ang.sin())
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        let n = 64;
        let x: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()))
            .collect();
        let want = naive_dft(&x);
        let mut got = x.clone();
        Fft::new(n).forward(&mut got);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).norm() < 1e-9, "{g} vs {w}");
        }
    }

    #[test]
    fn round_trip() {
        let n = 256;
        let x: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new((i as f64).sin(), (i as f64 * 0.11).sin()))
            .collect();
        let mut buf = x.clone();
        let plan = Fft::new(n);
        plan.forward(&mut buf);
        plan.inverse(&mut buf);
        for (a, b) in buf.iter().zip(&x) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn convolve_matches_direct() {
        let a = [1.0, 2.0, -1.0, 0.5, 3.0];
        let b = [0.5, -1.0, 2.0];
        let full = a.len() + b.len() - 1;
        let got = convolve(&a, &b, full);
        for i in 0..full {
            let mut want = 0.0;
            for j in 0..b.len() {
                if i >= j && i - j < a.len() {
                    want += a[i - j] * b[j];
                }
            }
            assert!((got[i] - want).abs() < 1e-12, "tap {i}: {} vs {want}", got[i]);
        }
    }
}
