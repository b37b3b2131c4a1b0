//! Short-time Fourier analysis and the concatenated real/imaginary
//! acoustic feature fed to the node encoder.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use num_complex::Complex64;
use thiserror::Error;

use crate::acoustics::MultiChannelWave;
use crate::fft::Fft;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("fft size {0} must be a power of two")]
    BadFftSize(usize),
    #[error("hop {hop} must be in 1..={fft_size}")]
    BadHop { hop: usize, fft_size: usize },
    #[error("signal of {len} samples is shorter than one frame ({fft_size})")]
    SignalTooShort { len: usize, fft_size: usize },
    #[error("channel lengths differ: {0} vs {1}")]
    RaggedChannels(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
    Rect,
}

/// STFT analysis parameters. Defaults: 512-point frames, 50% overlap, Hann.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { fft_size: 512, hop: 256, window: Window::Hann }
    }
}

impl StftConfig {
    fn validate(&self) -> Result<(), DspError> {
        if !self.fft_size.is_power_of_two() || self.fft_size < 2 {
            return Err(DspError::BadFftSize(self.fft_size));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(DspError::BadHop { hop: self.hop, fft_size: self.fft_size });
        }
        Ok(())
    }

    /// Frames produced for a signal of `len` samples (no padding).
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            (len - self.fft_size) / self.hop + 1
        }
    }

    /// One-sided bin count, DC and Nyquist included.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Width of the concatenated real/imag feature: two halves of
    /// `fft_size/2` bins each (DC dropped, Nyquist kept).
    pub fn feature_dim(&self) -> usize {
        self.fft_size
    }

    fn window_values(&self) -> Vec<f64> {
        match self.window {
            Window::Rect => vec![1.0; self.fft_size],
            Window::Hann => (0..self.fft_size)
                .map(|n| 0.5 * (1.0 - libm::cos(2.0 * PI * n as f64 / self.fft_size as f64)))
                .collect(),
        }
    }
}

/// One-sided complex spectrogram, `n_bins x n_frames`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    data: Vec<Complex64>, // bin-major: data[bin * n_frames + frame]
    n_bins: usize,
    n_frames: usize,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.n_frames + frame]
    }
}

/// Windowed one-sided STFT. `T = (len - fft_size)/hop + 1` frames, no padding.
pub fn stft(signal: &[f32], cfg: &StftConfig) -> Result<Spectrogram, DspError> {
    cfg.validate()?;
    if signal.len() < cfg.fft_size {
        return Err(DspError::SignalTooShort { len: signal.len(), fft_size: cfg.fft_size });
    }
    let n_frames = cfg.n_frames(signal.len());
    let n_bins = cfg.n_bins();
    let window = cfg.window_values();
    let plan = Fft::new(cfg.fft_size);

    let mut data = vec![Complex64::new(0.0, 0.0); n_bins * n_frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(signal[start + i] as f64 * window[i], 0.0);
        }
        plan.forward(&mut buf);
        for bin in 0..n_bins {
            data[bin * n_frames + t] = buf[bin];
        }
    }
    Ok(Spectrogram { data, n_bins, n_frames })
}

/// Per-node acoustic features, shape `n_nodes x feature_dim x n_frames`.
/// The feature axis is the imaginary parts of bins `1..=fft_size/2` followed
/// by the real parts of the same bins.
#[derive(Debug, Clone)]
pub struct FeatureBlock {
    data: Vec<f32>, // data[node * (feat_dim * n_frames) + feat * n_frames + frame]
    n_nodes: usize,
    feature_dim: usize,
    n_frames: usize,
}

impl FeatureBlock {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn at(&self, node: usize, feat: usize, frame: usize) -> f32 {
        self.data[node * self.feature_dim * self.n_frames + feat * self.n_frames + frame]
    }

    /// Feature vector of one node at one frame, copied into `out`.
    pub fn frame_into(&self, node: usize, frame: usize, out: &mut [f32]) {
        let base = node * self.feature_dim * self.n_frames;
        for (feat, slot) in out.iter_mut().enumerate() {
            *slot = self.data[base + feat * self.n_frames + frame];
        }
    }
}

/// Extract the concatenated imag/real feature for every channel of `wave`.
pub fn extract_features(wave: &MultiChannelWave, cfg: &StftConfig) -> Result<FeatureBlock, DspError> {
    let n_nodes = wave.n_channels();
    let feature_dim = cfg.feature_dim();
    let half = feature_dim / 2;

    let mut data = Vec::new();
    let mut n_frames = 0usize;
    for node in 0..n_nodes {
        let spec = stft(wave.channel(node), cfg)?;
        if node == 0 {
            n_frames = spec.n_frames();
            data = vec![0.0f32; n_nodes * feature_dim * n_frames];
        } else if spec.n_frames() != n_frames {
            return Err(DspError::RaggedChannels(n_frames, spec.n_frames()));
        }
        let base = node * feature_dim * n_frames;
        for k in 0..half {
            let bin = k + 1; // DC dropped
            for t in 0..n_frames {
                let c = spec.at(bin, t);
                data[base + k * n_frames + t] = c.im as f32;
                data[base + (half + k) * n_frames + t] = c.re as f32;
            }
        }
    }
    Ok(FeatureBlock { data, n_nodes, feature_dim, n_frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::MultiChannelWave;

    #[test]
    fn dc_only_spectrum_for_constant_signal() {
        let cfg = StftConfig { fft_size: 4, hop: 4, window: Window::Rect };
        let spec = stft(&[1.0; 8], &cfg).unwrap();
        assert_eq!(spec.n_frames(), 2);
        assert_eq!(spec.n_bins(), 3);
        for t in 0..2 {
            assert!((spec.at(0, t).re - 4.0).abs() < 1e-12);
            assert!(spec.at(0, t).im.abs() < 1e-12);
            assert!(spec.at(1, t).norm() < 1e-12);
            assert!(spec.at(2, t).norm() < 1e-12);
        }
    }

    #[test]
    fn pure_tone_lands_in_its_bin() {
        let n = 64;
        let cfg = StftConfig { fft_size: n, hop: n, window: Window::Rect };
        let signal: Vec<f32> = (0..n)
            .map(|i| libm::cos(2.0 * PI * 3.0 * i as f64 / n as f64) as f32)
            .collect();
        let spec = stft(&signal, &cfg).unwrap();
        for bin in 0..spec.n_bins() {
            let mag = spec.at(bin, 0).norm();
            if bin == 3 {
                assert!((mag - n as f64 / 2.0).abs() < 1e-4);
            } else {
                assert!(mag < 1e-4, "bin {bin} leaked {mag}");
            }
        }
    }

    #[test]
    fn frame_count_formula() {
        let cfg = StftConfig::default();
        let spec = stft(&vec![0.0f32; 32000], &cfg).unwrap();
        assert_eq!(spec.n_frames(), 124);
    }

    #[test]
    fn too_short_signal_rejected() {
        let cfg = StftConfig::default();
        assert_eq!(
            stft(&[0.0; 100], &cfg).unwrap_err(),
            DspError::SignalTooShort { len: 100, fft_size: 512 }
        );
    }

    #[test]
    fn zero_signal_features() {
        let wave = MultiChannelWave::new(vec![vec![0.0; 32000]; 3], 16000).unwrap();
        let fb = extract_features(&wave, &StftConfig::default()).unwrap();
        assert_eq!((fb.n_nodes(), fb.feature_dim(), fb.n_frames()), (3, 512, 124));
        assert!(fb.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn default_feature_shape() {
        let wave = MultiChannelWave::new(vec![vec![0.1; 32000]], 16000).unwrap();
        let fb = extract_features(&wave, &StftConfig::default()).unwrap();
        assert_eq!((fb.n_nodes(), fb.feature_dim(), fb.n_frames()), (1, 512, 124));
    }

    #[test]
    fn even_symmetric_frame_has_zero_imag_features() {
        // x[n] = x[(N-n) mod N] within one rectangular frame -> real DFT
        let n = 16;
        let cfg = StftConfig { fft_size: n, hop: n, window: Window::Rect };
        let mut frame = vec![0.0f32; n];
        for i in 0..n {
            frame[i] = libm::cos(2.0 * PI * 2.0 * i as f64 / n as f64) as f32
                + 0.5 * libm::cos(2.0 * PI * 5.0 * i as f64 / n as f64) as f32;
        }
        let wave = MultiChannelWave::new(vec![frame], 16000).unwrap();
        let fb = extract_features(&wave, &cfg).unwrap();
        let half = n / 2;
        for k in 0..half {
            assert!(fb.at(0, k, 0).abs() < 1e-5, "imag feature {k} = {}", fb.at(0, k, 0));
        }
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let signal: Vec<f32> = (0..4096)
            .map(|i| (libm::sin(i as f64 * 0.05) + 0.3 * libm::cos(i as f64 * 1.7)) as f32)
            .collect();
        let spec = stft(&signal, &cfg).unwrap();
        let window = cfg.window_values();
        for t in 0..spec.n_frames() {
            let start = t * cfg.hop;
            let time_energy: f64 = (0..cfg.fft_size)
                .map(|i| {
                    let v = signal[start + i] as f64 * window[i];
                    v * v
                })
                .sum();
            let mut freq_energy = spec.at(0, t).norm_sqr() + spec.at(cfg.n_bins() - 1, t).norm_sqr();
            for bin in 1..cfg.n_bins() - 1 {
                freq_energy += 2.0 * spec.at(bin, t).norm_sqr();
            }
            freq_energy /= cfg.fft_size as f64;
            assert!(
                (time_energy - freq_energy).abs() <= 1e-6 * time_energy.max(1e-30),
                "frame {t}: {time_energy} vs {freq_energy}"
            );
        }
    }

    #[test]
    fn features_linear_in_waveform() {
        let cfg = StftConfig { fft_size: 64, hop: 32, window: Window::Hann };
        let a: Vec<f32> = (0..256).map(|i| libm::sin(i as f64 * 0.3) as f32).collect();
        let b: Vec<f32> = (0..256).map(|i| libm::cos(i as f64 * 0.7) as f32).collect();
        let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let fa = extract_features(&MultiChannelWave::new(vec![a], 16000).unwrap(), &cfg).unwrap();
        let fb = extract_features(&MultiChannelWave::new(vec![b], 16000).unwrap(), &cfg).unwrap();
        let fs = extract_features(&MultiChannelWave::new(vec![sum], 16000).unwrap(), &cfg).unwrap();
        for feat in 0..fa.feature_dim() {
            for t in 0..fa.n_frames() {
                let want = fa.at(0, feat, t) + fb.at(0, feat, t);
                assert!((fs.at(0, feat, t) - want).abs() < 1e-3);
            }
        }
    }
}
