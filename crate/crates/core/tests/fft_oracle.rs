//! Cross-check the in-crate FFT against rustfft on random inputs.

use e2esl_core::fft::Fft;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

#[test]
fn forward_matches_rustfft() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut planner = FftPlanner::<f64>::new();
    for n in [4usize, 64, 512, 4096] {
        let x: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();

        let mut mine = x.clone();
        Fft::new(n).forward(&mut mine);

        let mut theirs: Vec<rustfft::num_complex::Complex64> = x
            .iter()
            .map(|c| rustfft::num_complex::Complex64::new(c.re, c.im))
            .collect();
        planner.plan_fft_forward(n).process(&mut theirs);

        for (a, b) in mine.iter().zip(&theirs) {
            assert!(
                (a.re - b.re).abs() < 1e-9 && (a.im - b.im).abs() < 1e-9,
                "n={n}: {a} vs {b}"
            );
        }
    }
}
