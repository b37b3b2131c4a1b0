//! Room acoustics: image-source impulse responses, isotropic diffuse noise,
//! and multi-channel scene rendering at a target SNR.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use num_complex::Complex64;
use thiserror::Error;

use crate::fft::{next_pow2, Fft};
use crate::grid::{AreaIndex, GridSpec, Point2, RoomDims};
use crate::rng;

/// Default speed of sound, m/s. Matches the usual image-source convention.
pub const SPEED_OF_SOUND: f64 = 340.0;

/// Number of plane waves used to approximate a spherically isotropic field.
pub const DEFAULT_PLANE_WAVES: usize = 64;

/// Hard cap on impulse response length: 2 seconds of taps.
pub const MAX_RIR_SECONDS: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum AcousticsError {
    #[error("point {axis}={value} outside room extent [0, {limit}]")]
    PointOutsideRoom { axis: char, value: f64, limit: f64 },
    #[error("scene must contain at least one node")]
    NoNodes,
    #[error("t60 must be positive and finite, got {0}")]
    BadT60(f64),
    #[error("sample rate must be positive, got {0}")]
    BadSampleRate(f64),
    #[error("snr must not be NaN")]
    BadSnr,
    #[error("t60 {t60} s is infeasible for this room: Sabine absorption {alpha} >= 1")]
    InfeasibleReverberation { t60: f64, alpha: f64 },
    #[error("source and microphone coincide at ({x}, {y}, {z})")]
    DegenerateGeometry { x: f64, y: f64, z: f64 },
    #[error("source of {len} samples is shorter than required {required}")]
    SourceTooShort { len: usize, required: usize },
    #[error("source signal has zero power")]
    SilentSource,
    #[error("scene room does not match grid room")]
    RoomMismatch,
    #[error("channel lengths differ: {0} vs {1}")]
    RaggedChannels(usize, usize),
    #[error("wave must contain at least one channel")]
    NoChannels,
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// A position inside the room, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl ScenePoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        ScenePoint { x, y, z }
    }

    pub fn xy(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn dist(&self, other: &ScenePoint) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        num_traits::Float::sqrt(dx * dx + dy * dy + dz * dz)
    }

    fn check_in_room(&self, room: &RoomDims) -> Result<(), AcousticsError> {
        for (axis, value, limit) in [
            ('x', self.x, room.x_len),
            ('y', self.y, room.y_len),
            ('z', self.z, room.z_len),
        ] {
            if !(value.is_finite() && (0.0..=limit).contains(&value)) {
                return Err(AcousticsError::PointOutsideRoom { axis, value, limit });
            }
        }
        Ok(())
    }
}

/// One simulated trial: geometry plus the acoustic conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub room: RoomDims,
    pub nodes: Vec<ScenePoint>,
    pub speaker: ScenePoint,
    pub t60: f64,
    pub snr_db: f64,
    pub sample_rate: f64,
    pub source_id: String,
}

impl Scene {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        room: RoomDims,
        nodes: Vec<ScenePoint>,
        speaker: ScenePoint,
        t60: f64,
        snr_db: f64,
        sample_rate: f64,
        source_id: String,
    ) -> Result<Self, AcousticsError> {
        if nodes.is_empty() {
            return Err(AcousticsError::NoNodes);
        }
        for p in nodes.iter().chain(core::iter::once(&speaker)) {
            p.check_in_room(&room)?;
        }
        if !(t60.is_finite() && t60 > 0.0) {
            return Err(AcousticsError::BadT60(t60));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(AcousticsError::BadSampleRate(sample_rate));
        }
        if snr_db.is_nan() {
            return Err(AcousticsError::BadSnr);
        }
        Ok(Scene { room, nodes, speaker, t60, snr_db, sample_rate, source_id })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Room impulse response.
#[derive(Debug, Clone)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: f64,
}

/// Equal-length waveforms recorded by the N nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelWave {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl MultiChannelWave {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self, AcousticsError> {
        let first = channels.first().ok_or(AcousticsError::NoChannels)?.len();
        for ch in &channels {
            if ch.len() != first {
                return Err(AcousticsError::RaggedChannels(first, ch.len()));
            }
        }
        Ok(MultiChannelWave { channels, sample_rate })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        &self.channels[i]
    }
}

/// One rendered trial: recordings plus the grid-encoded geometry labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub waves: MultiChannelWave,
    pub node_areas: Vec<AreaIndex>,
    pub speaker_area: AreaIndex,
    pub speaker_xy: Point2,
    pub scene: Scene,
}

/// Uniform wall reflection coefficient from a target reverberation time via
/// Sabine's formula: alpha = 0.161 V / (S t60), beta = sqrt(1 - alpha).
pub fn t60_to_reflection(room: &RoomDims, t60: f64) -> Result<f64, AcousticsError> {
    if !(t60.is_finite() && t60 > 0.0) {
        return Err(AcousticsError::BadT60(t60));
    }
    let alpha = 0.161 * room.volume() / (room.surface_area() * t60);
    if alpha >= 1.0 {
        return Err(AcousticsError::InfeasibleReverberation { t60, alpha });
    }
    let alpha = alpha.min(0.9999);
    Ok(num_traits::Float::sqrt(1.0 - alpha))
}

/// Knobs for the image-source generator. `c` is the speed of sound;
/// `interp_taps` is the width of the windowed-sinc fractional-delay filter.
#[derive(Debug, Clone, Copy)]
pub struct RirOptions {
    pub c: f64,
    pub interp_taps: usize,
}

impl Default for RirOptions {
    fn default() -> Self {
        RirOptions { c: SPEED_OF_SOUND, interp_taps: 81 }
    }
}

// One mirrored axis: image coordinate offset (sample units) and the number
// of wall reflections it implies.
struct AxisImages {
    // (coordinate relative to mic, reflection count)
    entries: Vec<(f64, u32)>,
}

fn axis_images(src: f64, mic: f64, len: f64, order: i64) -> AxisImages {
    let mut entries = Vec::with_capacity((2 * order as usize + 1) * 2);
    for m in -order..=order {
        for q in 0..=1i64 {
            let coord = (1 - 2 * q) as f64 * src - mic + 2.0 * m as f64 * len;
            let refl = (m - q).unsigned_abs() as u32 + m.unsigned_abs() as u32;
            entries.push((coord, refl));
        }
    }
    AxisImages { entries }
}

/// Allen-Berkley image-source RIR with windowed-sinc fractional delays.
/// All six walls share the reflection coefficient `beta`.
pub fn generate_rir(
    room: &RoomDims,
    src: &ScenePoint,
    mic: &ScenePoint,
    beta: f64,
    sample_rate: f64,
    length: usize,
) -> Result<Rir, AcousticsError> {
    generate_rir_with(room, src, mic, beta, sample_rate, length, &RirOptions::default())
}

pub fn generate_rir_with(
    room: &RoomDims,
    src: &ScenePoint,
    mic: &ScenePoint,
    beta: f64,
    sample_rate: f64,
    length: usize,
    opts: &RirOptions,
) -> Result<Rir, AcousticsError> {
    src.check_in_room(room)?;
    mic.check_in_room(room)?;
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(AcousticsError::BadSampleRate(sample_rate));
    }
    if src.dist(mic) < 1e-9 {
        return Err(AcousticsError::DegenerateGeometry { x: src.x, y: src.y, z: src.z });
    }

    let cts = opts.c / sample_rate; // meters per sample
    let lx = room.x_len / cts;
    let ly = room.y_len / cts;
    let lz = room.z_len / cts;

    let order = |l: f64| -> i64 { libm::ceil(length as f64 / (2.0 * l)) as i64 };
    let xs = axis_images(src.x / cts, mic.x / cts, lx, order(lx));
    let ys = axis_images(src.y / cts, mic.y / cts, ly, order(ly));
    let zs = axis_images(src.z / cts, mic.z / cts, lz, order(lz));

    // beta^e lookup; exponents are bounded by the loop orders
    let max_exp = xs.entries.iter().map(|e| e.1).max().unwrap_or(0)
        + ys.entries.iter().map(|e| e.1).max().unwrap_or(0)
        + zs.entries.iter().map(|e| e.1).max().unwrap_or(0);
    let mut beta_pow = Vec::with_capacity(max_exp as usize + 1);
    let mut acc = 1.0f64;
    beta_pow.push(1.0);
    for _ in 0..max_exp {
        acc *= beta;
        beta_pow.push(acc);
    }

    let taps = opts.interp_taps;
    let center = (taps / 2) as i64;
    // Hann taper over the interpolator support, tabulated at integer offsets;
    // the fractional shift is folded in per image via angle addition.
    let dw = 2.0 * PI / taps as f64;
    let win_cos: Vec<f64> = (0..taps).map(|n| libm::cos(dw * (n as i64 - center) as f64)).collect();
    let win_sin: Vec<f64> = (0..taps).map(|n| libm::sin(dw * (n as i64 - center) as f64)).collect();

    let mut imp = vec![0.0f64; length];
    let norm = 1.0 / (4.0 * PI * cts);
    let max_dist = (length as i64 + center) as f64;

    for &(dx, ex) in &xs.entries {
        let dx2 = dx * dx;
        for &(dy, ey) in &ys.entries {
            let dxy2 = dx2 + dy * dy;
            let exy = ex + ey;
            for &(dz, ez) in &zs.entries {
                let dist = num_traits::Float::sqrt(dxy2 + dz * dz);
                if dist >= max_dist || dist < 1e-9 {
                    continue;
                }
                let gain = beta_pow[(exy + ez) as usize] * norm / dist;
                if gain == 0.0 {
                    continue;
                }

                let fdist = libm::floor(dist);
                let frac = dist - fdist;
                let base = fdist as i64 - center;

                // sin(pi*(k - frac)) alternates as (-1)^(k+1) * sin(pi*frac)
                let s = libm::sin(PI * frac);
                let (wf_sin, wf_cos) = libm::sincos(dw * frac);
                let lo = (-base).max(0) as usize;
                let hi = taps.min((length as i64 - base).max(0) as usize);
                let mut sign = if (lo as i64 - center) % 2 == 0 { -1.0 } else { 1.0 };
                for n in lo..hi {
                    let t = (n as i64 - center) as f64 - frac;
                    let sinc = if libm::fabs(t) < 1e-9 { 1.0 } else { sign * s / (PI * t) };
                    let w = 0.5 * (1.0 + win_cos[n] * wf_cos + win_sin[n] * wf_sin);
                    imp[(base + n as i64) as usize] += gain * w * sinc;
                    sign = -sign;
                }
            }
        }
    }

    Ok(Rir { taps: imp, sample_rate })
}

// Evenly distributed unit vectors via the Fibonacci sphere; deterministic
// quadrature keeps the simulated field's coherence close to the isotropic
// ideal with few waves.
fn sphere_directions(k: usize) -> Vec<[f64; 3]> {
    let golden_angle = PI * (3.0 - num_traits::Float::sqrt(5.0));
    (0..k)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / k as f64;
            let r = num_traits::Float::sqrt((1.0 - z * z).max(0.0));
            let phi = golden_angle * i as f64;
            [r * libm::cos(phi), r * libm::sin(phi), z]
        })
        .collect()
}

/// Spherically isotropic noise at the node positions: a sum of plane waves
/// from `DEFAULT_PLANE_WAVES` directions, each carrying an independent white
/// waveform delayed per node by the projection onto the propagation
/// direction. Channels are normalized to unit power.
pub fn diffuse_noise(
    nodes: &[ScenePoint],
    duration: usize,
    sample_rate: f64,
    seed: u64,
) -> Result<MultiChannelWave, AcousticsError> {
    diffuse_noise_with(nodes, duration, sample_rate, seed, DEFAULT_PLANE_WAVES)
}

pub fn diffuse_noise_with(
    nodes: &[ScenePoint],
    duration: usize,
    sample_rate: f64,
    seed: u64,
    k_waves: usize,
) -> Result<MultiChannelWave, AcousticsError> {
    if nodes.is_empty() {
        return Err(AcousticsError::NoNodes);
    }
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(AcousticsError::BadSampleRate(sample_rate));
    }
    assert!(duration > 0, "noise duration must be positive");

    let n = nodes.len();
    let nfft = next_pow2(duration.max(2));
    let half = nfft / 2;
    let dirs = sphere_directions(k_waves.max(1));

    // Per-node spectrum accumulators over one-sided bins 0..=half.
    let mut spectra = vec![vec![Complex64::new(0.0, 0.0); half + 1]; n];
    let mut wave_spec = vec![Complex64::new(0.0, 0.0); half + 1];
    let inv_sqrt2 = 1.0 / num_traits::Float::sqrt(2.0);

    for (w, dir) in dirs.iter().enumerate() {
        let mut r = rng::stream(seed, w as u64);
        for bin in wave_spec.iter_mut().take(half).skip(1) {
            *bin = Complex64::new(rng::normal(&mut r), rng::normal(&mut r)) * inv_sqrt2;
        }
        for (node, p) in nodes.iter().enumerate() {
            // delay of this plane wave at this node, seconds
            let tau = (p.x * dir[0] + p.y * dir[1] + p.z * dir[2]) / SPEED_OF_SOUND;
            let dphi = -2.0 * PI * sample_rate * tau / nfft as f64;
            let step = Complex64::new(libm::cos(dphi), libm::sin(dphi));
            let mut rot = step;
            let acc = &mut spectra[node];
            for b in 1..half {
                acc[b] += wave_spec[b] * rot;
                rot *= step;
            }
        }
    }

    let plan = Fft::new(nfft);
    let mut channels = Vec::with_capacity(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for acc in &spectra {
        for slot in buf.iter_mut() {
            *slot = Complex64::new(0.0, 0.0);
        }
        for b in 1..half {
            buf[b] = acc[b];
            buf[nfft - b] = acc[b].conj();
        }
        plan.inverse(&mut buf);
        let mut ch: Vec<f64> = buf.iter().take(duration).map(|c| c.re).collect();
        let power: f64 = ch.iter().map(|x| x * x).sum::<f64>() / duration as f64;
        if power > 0.0 {
            let inv = 1.0 / num_traits::Float::sqrt(power);
            for x in ch.iter_mut() {
                *x *= inv;
            }
        }
        channels.push(ch.iter().map(|&x| x as f32).collect());
    }
    MultiChannelWave::new(channels, sample_rate as u32)
}

/// Reverberant speech and scaled noise prior to mixing; exposed so tests can
/// measure the SNR contract and linearity directly.
#[derive(Debug, Clone)]
pub struct RenderedComponents {
    pub speech: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f32>>,
    pub noise_gain: f64,
    pub nearest_node: usize,
}

/// Render a scene: convolve the source with each node's RIR, add diffuse
/// noise scaled so the SNR at the node nearest the speaker matches
/// `scene.snr_db`, and fill in the grid labels.
pub fn render_scene(
    scene: &Scene,
    grid: &GridSpec,
    source: &[f32],
    seed: u64,
) -> Result<Sample, AcousticsError> {
    let (sample, _) = render_scene_components(scene, grid, source, seed)?;
    Ok(sample)
}

pub fn render_scene_components(
    scene: &Scene,
    grid: &GridSpec,
    source: &[f32],
    seed: u64,
) -> Result<(Sample, RenderedComponents), AcousticsError> {
    let beta = t60_to_reflection(&scene.room, scene.t60)?;
    render_scene_with_beta(scene, grid, source, seed, beta)
}

/// Like [`render_scene_components`] but with an explicit wall reflection
/// coefficient instead of the Sabine bridge; `beta = 0` renders anechoic.
pub fn render_scene_with_beta(
    scene: &Scene,
    grid: &GridSpec,
    source: &[f32],
    seed: u64,
    beta: f64,
) -> Result<(Sample, RenderedComponents), AcousticsError> {
    if *grid.room() != scene.room {
        return Err(AcousticsError::RoomMismatch);
    }
    let fs = scene.sample_rate;
    let required = libm::ceil(2.0 * fs) as usize;
    if source.len() < required {
        return Err(AcousticsError::SourceTooShort { len: source.len(), required });
    }
    let src_power: f64 = source.iter().map(|&x| x as f64 * x as f64).sum();
    if src_power == 0.0 {
        return Err(AcousticsError::SilentSource);
    }

    let opts = RirOptions::default();
    let diag = ScenePoint::new(0.0, 0.0, 0.0)
        .dist(&ScenePoint::new(scene.room.x_len, scene.room.y_len, scene.room.z_len));
    let min_len = libm::ceil(diag / opts.c * fs) as usize + opts.interp_taps + 1;
    let rir_len =
        (libm::ceil(scene.t60 * fs) as usize).max(min_len).min(libm::ceil(MAX_RIR_SECONDS * fs) as usize);

    let out_len = source.len();
    let nfft = next_pow2(out_len + rir_len - 1);
    let plan = Fft::new(nfft);
    let mut src_spec = vec![Complex64::new(0.0, 0.0); nfft];
    for (slot, &x) in src_spec.iter_mut().zip(source) {
        slot.re = x as f64;
    }
    plan.forward(&mut src_spec);

    let mut speech: Vec<Vec<f64>> = Vec::with_capacity(scene.n_nodes());
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for node in &scene.nodes {
        let rir = generate_rir_with(&scene.room, &scene.speaker, node, beta, fs, rir_len, &opts)?;
        for slot in buf.iter_mut() {
            *slot = Complex64::new(0.0, 0.0);
        }
        for (slot, &tap) in buf.iter_mut().zip(&rir.taps) {
            slot.re = tap;
        }
        plan.forward(&mut buf);
        for (x, s) in buf.iter_mut().zip(&src_spec) {
            *x *= s;
        }
        plan.inverse(&mut buf);
        speech.push(buf.iter().take(out_len).map(|c| c.re).collect());
    }

    let noise = diffuse_noise(&scene.nodes, out_len, fs, rng::mix_seed(seed, 0x6e6f_6973))?;

    let nearest = {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, node) in scene.nodes.iter().enumerate() {
            let d = node.dist(&scene.speaker);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };

    let p_speech: f64 =
        speech[nearest].iter().map(|&x| x * x).sum::<f64>() / out_len as f64;
    let p_noise: f64 = noise
        .channel(nearest)
        .iter()
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        / out_len as f64;
    let noise_gain = if scene.snr_db == f64::INFINITY || p_noise == 0.0 {
        0.0
    } else {
        num_traits::Float::sqrt(p_speech / (p_noise * libm::pow(10.0, scene.snr_db / 10.0)))
    };

    let mut channels = Vec::with_capacity(scene.n_nodes());
    let mut noise_scaled = Vec::with_capacity(scene.n_nodes());
    for (i, sp) in speech.iter().enumerate() {
        let nz = noise.channel(i);
        let mut mixed = Vec::with_capacity(out_len);
        let mut scaled = Vec::with_capacity(out_len);
        for (s, &v) in sp.iter().zip(nz) {
            let nval = noise_gain * v as f64;
            scaled.push(nval as f32);
            mixed.push((s + nval) as f32);
        }
        channels.push(mixed);
        noise_scaled.push(scaled);
    }

    let node_areas = scene
        .nodes
        .iter()
        .map(|p| grid.locate_area(p.xy()))
        .collect::<Result<Vec<AreaIndex>, _>>()?;
    let speaker_xy = scene.speaker.xy();
    let speaker_area = grid.locate_area(speaker_xy)?;

    let sample = Sample {
        waves: MultiChannelWave::new(channels, fs as u32)?,
        node_areas,
        speaker_area,
        speaker_xy,
        scene: scene.clone(),
    };
    let parts = RenderedComponents { speech, noise: noise_scaled, noise_gain, nearest_node: nearest };
    Ok((sample, parts))
}
