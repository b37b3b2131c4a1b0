//! Self-contained speech-like test signal: formant-filtered excitation with
//! a syllable-rate amplitude envelope. Stands in for a speech corpus so the
//! pipeline can run without licensed audio.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use rand_chacha::ChaCha8Rng;

use crate::rng;

// Two-pole resonator, unit gain at the resonant frequency.
struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    z1: f64,
    z2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, fs: f64) -> Self {
        let r = libm::exp(-PI * bandwidth / fs);
        let theta = 2.0 * PI * freq / fs;
        let a1 = -2.0 * r * libm::cos(theta);
        let a2 = r * r;
        Resonator { b0: 1.0 - r, a1, a2, z1: 0.0, z2: 0.0 }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x - self.a1 * self.z1 - self.a2 * self.z2;
        self.z2 = self.z1;
        self.z1 = y;
        y
    }
}

/// Generate `len` samples of a speech-like signal. Voiced-ish excitation
/// (pulse train plus noise) runs through three formant resonators and is
/// gated by a syllabic envelope that never drops fully silent.
pub fn synthetic_speech(len: usize, sample_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let fs = sample_rate;
    let f0_base = rng::uniform(rng, 95.0, 220.0);
    let mut formants = [
        Resonator::new(rng::uniform(rng, 300.0, 800.0), 90.0, fs),
        Resonator::new(rng::uniform(rng, 1000.0, 2000.0), 140.0, fs),
        Resonator::new(rng::uniform(rng, 2300.0, 3200.0), 220.0, fs),
    ];

    // syllable envelope: random-length raised-cosine bumps over a floor
    let mut envelope = vec![0.0f64; len];
    let floor = 0.12;
    let mut pos = 0usize;
    while pos < len {
        let dur = (rng::uniform(rng, 0.08, 0.28) * fs) as usize;
        let peak = rng::uniform(rng, 0.5, 1.0);
        let end = (pos + dur).min(len);
        for (i, slot) in envelope[pos..end].iter_mut().enumerate() {
            let phase = i as f64 / dur as f64;
            *slot = floor + (peak - floor) * 0.5 * (1.0 - libm::cos(2.0 * PI * phase));
        }
        pos = end;
        // short gap between syllables, still above the floor
        let gap = (rng::uniform(rng, 0.01, 0.06) * fs) as usize;
        let gap_end = (pos + gap).min(len);
        for slot in envelope[pos..gap_end].iter_mut() {
            *slot = floor;
        }
        pos = gap_end;
    }

    let mut out = Vec::with_capacity(len);
    let mut phase = 0.0f64;
    let mut f0_drift = 0.0f64;
    let mut peak = 0.0f64;
    for (i, &env) in envelope.iter().enumerate() {
        if i % 512 == 0 {
            f0_drift = rng::uniform(rng, -15.0, 15.0);
        }
        let f0 = f0_base + f0_drift;
        phase += f0 / fs;
        let mut pulse = 0.0;
        if phase >= 1.0 {
            phase -= 1.0;
            pulse = 1.0;
        }
        let excitation = 6.0 * pulse + 0.6 * rng::normal(rng);
        let mut v = excitation;
        for f in formants.iter_mut() {
            v = f.process(v);
        }
        // fricative-like bypass keeps some energy above the formants
        let y = (v + 0.02 * rng::normal(rng)) * env;
        peak = peak.max(libm::fabs(y));
        out.push(y);
    }

    let scale = if peak > 0.0 { 0.5 / peak } else { 1.0 };
    out.iter().map(|&x| (x * scale) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a = synthetic_speech(8000, 16000.0, &mut rng::stream(3, 1));
        let b = synthetic_speech(8000, 16000.0, &mut rng::stream(3, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn bounded_and_never_silent() {
        let x = synthetic_speech(32000, 16000.0, &mut rng::stream(5, 2));
        assert_eq!(x.len(), 32000);
        assert!(x.iter().all(|v| v.abs() <= 0.5 + 1e-6));
        // no half-second window is fully silent
        let win = 8000;
        for start in (0..x.len() - win).step_by(win) {
            let energy: f32 = x[start..start + win].iter().map(|v| v * v).sum();
            assert!(energy > 1e-4, "window at {start} is silent");
        }
    }

    #[test]
    fn broadband_energy() {
        use crate::dsp::{stft, StftConfig};
        let x = synthetic_speech(32000, 16000.0, &mut rng::stream(9, 0));
        let spec = stft(&x, &StftConfig::default()).unwrap();
        // energy present in low, mid, and high bands
        let band_energy = |lo: usize, hi: usize| -> f64 {
            let mut e = 0.0;
            for bin in lo..hi {
                for t in 0..spec.n_frames() {
                    e += spec.at(bin, t).norm_sqr();
                }
            }
            e
        };
        let low = band_energy(2, 40);
        let mid = band_energy(40, 120);
        let high = band_energy(120, 240);
        assert!(low > 0.0 && mid > 0.0 && high > 0.0);
        assert!(mid > low * 1e-4 && high > low * 1e-5, "low {low} mid {mid} high {high}");
    }
}
