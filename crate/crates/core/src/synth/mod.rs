//! Synthetic face videos with a known pulse.
//!
//! Each clip shows a soft-edged elliptical skin patch on a textured
//! background. The skin albedo is modulated by a blood volume pulse (a
//! sinusoid plus a 0.3-amplitude second harmonic, with a slow linear heart
//! rate drift), mostly in the green channel. Illumination drifts slowly,
//! the patch may translate rigidly along a sinusoidal path, and Gaussian
//! sensor noise is added before quantization to 8-bit RGB.
//!
//! Clip `i` of a dataset depends only on the configuration, the dataset
//! seed and `i`.
//!
//! ```
//! use physformer::synth::{generate_clip, SynthConfig};
//!
//! let cfg = SynthConfig { duration_s: 2.0, height: 16, width: 16, ..SynthConfig::default() };
//! let a = generate_clip(&cfg, 7, 0);
//! assert_eq!(a.rgb.len(), 60 * 16 * 16 * 3);
//! assert_eq!(a, generate_clip(&cfg, 7, 0));
//! ```

pub mod io;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::loss::{HR_MAX, HR_MIN};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Generator settings. Ranges are sampled uniformly per clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub fps: f64,
    pub duration_s: f64,
    pub height: usize,
    pub width: usize,
    /// Mean heart rate range in bpm.
    pub hr_range: [f64; 2],
    /// Largest total heart-rate change across a clip, in bpm.
    pub hr_drift: f64,
    /// Relative modulation depth of the green skin intensity.
    pub amplitude: [f64; 2],
    /// Sensor noise standard deviation as a fraction of the pixel range.
    pub noise_sigma: f64,
    /// Peak rigid displacement of the skin patch in pixels.
    pub motion_px: [f64; 2],
    /// Relative amplitude of the global illumination drift.
    pub illumination_drift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            fps: 30.0,
            duration_s: 10.0,
            height: 64,
            width: 64,
            hr_range: [55.0, 140.0],
            hr_drift: 2.0,
            amplitude: [0.01, 0.05],
            noise_sigma: 0.01,
            motion_px: [0.0, 6.0],
            illumination_drift: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.hr_range;
        if !(HR_MIN as f64 <= lo && lo <= hi && hi <= HR_MAX as f64) {
            return Err(config_err!("heart-rate range {:?} must lie within [{HR_MIN}, {HR_MAX}]", self.hr_range));
        }
        if lo - self.hr_drift / 2.0 < HR_MIN as f64 || hi + self.hr_drift / 2.0 > HR_MAX as f64 {
            return Err(config_err!("heart-rate drift {} leaves the class band", self.hr_drift));
        }
        if !(self.fps > 0.0) || self.frames() < 2 || self.height < 8 || self.width < 8 {
            return Err(config_err!("fps, duration and frame size must describe a non-trivial video"));
        }
        let ok = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1];
        if !ok(self.amplitude) || !ok(self.motion_px) || self.noise_sigma < 0.0 || self.illumination_drift < 0.0 {
            return Err(config_err!("amplitude, motion, noise and drift must be non-negative ranges"));
        }
        Ok(())
    }
}

/// One video with its ground truth. Frames are `T × H × W × 3` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub fps: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
    /// Ground-truth pulse, one value per frame.
    pub bvp: Vec<f64>,
    /// Instantaneous heart rate per frame in bpm.
    pub hr_inst: Vec<f64>,
    /// Clip heart rate in bpm.
    pub hr: f64,
    /// Generation parameters (synthetic clips only).
    pub meta: Option<SynthMeta>,
}

/// Per-clip draws of the generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub hr_drift: f64,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub motion_px: f64,
    pub illumination_drift: f64,
}

/// Model input with its targets: `x` is `[3, T, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<E: Element = f32> {
    pub x: Tensor<E>,
    pub bvp: Vec<f64>,
    pub hr: f64,
}

pub fn clip_id(index: usize) -> String {
    format!("clip{index:05}")
}

/// Renders clip `index` of the dataset seeded with `seed`.
pub fn generate_clip(cfg: &SynthConfig, seed: u64, index: usize) -> Clip {
    let mut rng = Rng::derive(seed, index as u64 + 1);
    let (t_len, h, w) = (cfg.frames(), cfg.height, cfg.width);
    let u = |rng: &mut Rng, r: [f64; 2]| if r[1] > r[0] { rng.uniform(r[0], r[1]) } else { r[0] };

    let hr0 = u(&mut rng, cfg.hr_range);
    let drift = rng.uniform(-0.5, 0.5) * cfg.hr_drift;
    let amp = u(&mut rng, cfg.amplitude);
    let motion = u(&mut rng, cfg.motion_px);
    let motion_f = rng.uniform(0.15, 0.5);
    let motion_phase = rng.uniform(0.0, 2.0 * PI);
    let motion_dir = rng.uniform(0.0, 2.0 * PI);
    let illum_f = rng.uniform(0.05, 0.3);
    let illum_phase = rng.uniform(0.0, 2.0 * PI);
    let pulse_phase = rng.uniform(0.0, 2.0 * PI);
    let harmonic_phase = rng.uniform(0.0, 2.0 * PI);

    // Pulse: phase integrates the linearly drifting rate.
    let mut hr_inst = Vec::with_capacity(t_len);
    let mut bvp = Vec::with_capacity(t_len);
    let mut phase = pulse_phase;
    for t in 0..t_len {
        let rate = hr0 + drift * (t as f64 / (t_len - 1) as f64 - 0.5);
        hr_inst.push(rate);
        bvp.push(phase.sin() + 0.3 * (2.0 * phase + harmonic_phase).sin());
        phase += 2.0 * PI * rate / 60.0 / cfg.fps;
    }
    let peak = bvp.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    bvp.iter_mut().for_each(|v| *v /= peak);

    // Skin colour and textures.
    let r = rng.uniform(150.0, 220.0);
    let skin = [r, r * rng.uniform(0.6, 0.75), r * rng.uniform(0.45, 0.6)];
    let weights = [0.5, 1.0, 0.3];
    let pad = motion.ceil() as usize + 2;
    let (tw, th) = (w + 2 * pad, h + 2 * pad);
    let skin_tex = smooth_texture(&mut rng, th, tw, 0.06);
    let bg_base = [rng.uniform(40.0, 120.0), rng.uniform(40.0, 120.0), rng.uniform(40.0, 120.0)];
    let bg_tex = smooth_texture(&mut rng, h, w, 0.25);
    let (ax, ay) = (0.28 * w as f64, 0.36 * h as f64);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    let mut rgb = Vec::with_capacity(t_len * h * w * 3);
    for t in 0..t_len {
        let secs = t as f64 / cfg.fps;
        let disp = motion * (2.0 * PI * motion_f * secs + motion_phase).sin();
        let (ox, oy) = (disp * motion_dir.cos(), disp * motion_dir.sin());
        let gain = 1.0 + cfg.illumination_drift * (2.0 * PI * illum_f * secs + illum_phase).sin();
        for y in 0..h {
            for x in 0..w {
                let (lx, ly) = (x as f64 - ox, y as f64 - oy);
                let rr = (((lx - cx) / ax).powi(2) + ((ly - cy) / ay).powi(2)).sqrt();
                let m = ((1.0 - rr) * ax / 1.5 + 0.5).clamp(0.0, 1.0);
                let tex = if m > 0.0 { bilinear(&skin_tex, tw, th, lx + pad as f64, ly + pad as f64) } else { 0.0 };
                let bg = bg_tex[y * w + x];
                for c in 0..3 {
                    let s = skin[c] * (1.0 + tex) * (1.0 + amp * weights[c] * bvp[t]);
                    let b = bg_base[c] * (1.0 + bg);
                    let mut v = gain * (m * s + (1.0 - m) * b);
                    if cfg.noise_sigma > 0.0 {
                        v += 255.0 * cfg.noise_sigma * rng.normal();
                    }
                    rgb.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Clip {
        id: clip_id(index),
        fps: cfg.fps,
        frames: t_len,
        height: h,
        width: w,
        rgb,
        bvp,
        hr_inst,
        hr: hr0,
        meta: Some(SynthMeta {
            hr_drift: drift,
            amplitude: amp,
            noise_sigma: cfg.noise_sigma,
            motion_px: motion,
            illumination_drift: cfg.illumination_drift,
        }),
    }
}

/// Zero-mean texture of relative amplitude `amp`: a few random plane waves.
fn smooth_texture(rng: &mut Rng, h: usize, w: usize, amp: f64) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            let f = rng.uniform(0.05, 0.3);
            let th = rng.uniform(0.0, PI);
            [f * th.cos(), f * th.sin(), rng.uniform(0.0, 2.0 * PI), rng.uniform(0.3, 1.0)]
        })
        .collect();
    let norm: f64 = waves.iter().map(|wv| wv[3]).sum();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = waves.iter().map(|wv| wv[3] * (2.0 * PI * (wv[0] * x as f64 + wv[1] * y as f64) + wv[2]).sin()).sum();
            out.push(amp * s / norm);
        }
    }
    out
}

fn bilinear(img: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

impl Clip {
    /// Spatial mean of one channel per frame.
    pub fn channel_mean(&self, channel: usize) -> Vec<f64> {
        let px = self.height * self.width;
        self.rgb
            .chunks_exact(px * 3)
            .map(|f| f.iter().skip(channel).step_by(3).map(|&v| v as f64).sum::<f64>() / px as f64)
            .collect()
    }

    /// Frames `start..start + len` as a model sample; the label is the mean
    /// instantaneous heart rate over the window.
    pub fn window<E: Element>(&self, start: usize, len: usize) -> Result<Sample<E>> {
        if len == 0 || start + len > self.frames {
            return Err(config_err!("window {start}+{len} exceeds clip {} of {} frames", self.id, self.frames));
        }
        let (h, w) = (self.height, self.width);
        let px = h * w;
        let mut data = vec![E::ZERO; 3 * len * px];
        for t in 0..len {
            let frame = &self.rgb[(start + t) * px * 3..(start + t + 1) * px * 3];
            for (p, rgb) in frame.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[(c * len + t) * px + p] = E::from_f64(rgb[c] as f64 / 255.0);
                }
            }
        }
        let hr = self.hr_inst[start..start + len].iter().sum::<f64>() / len as f64;
        Ok(Sample { x: Tensor::new(vec![3, len, h, w], data)?, bvp: self.bvp[start..start + len].to_vec(), hr })
    }
}

/// Reverses the width axis of a `[3, T, H, W]` sample.
pub fn flip_horizontal<E: Element>(s: &Sample<E>) -> Sample<E> {
    let w = s.x.shape()[3];
    let mut out = s.clone();
    for (dst, src) in out.x.data_mut().chunks_exact_mut(w).zip(s.x.data().chunks_exact(w)) {
        for (i, v) in dst.iter_mut().enumerate() {
            *v = src[w - 1 - i];
        }
    }
    out
}

/// Plays a sample `factor` times faster: output frame `i` is the linear
/// interpolation of input position `i·factor`, the BVP is resampled the
/// same way and the heart rate scales by `factor`. The output has
/// `floor((T - 1) / factor) + 1` frames.
pub fn resample_temporal<E: Element>(s: &Sample<E>, factor: f64) -> Result<Sample<E>> {
    let sh = s.x.shape().to_vec();
    let (t_in, px) = (sh[1], sh[2] * sh[3]);
    if !(factor > 0.0) {
        return Err(config_err!("resampling factor must be positive, got {factor}"));
    }
    let t_out = ((t_in - 1) as f64 / factor + 1e-9).floor() as usize + 1;
    let pos: Vec<(usize, usize, f64)> = (0..t_out)
        .map(|i| {
            let p = i as f64 * factor;
            let i0 = (p.floor() as usize).min(t_in - 1);
            let i1 = (i0 + 1).min(t_in - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect();
    let src = s.x.data();
    let mut data = Vec::with_capacity(3 * t_out * px);
    for c in 0..3 {
        for &(i0, i1, a) in &pos {
            let (f0, f1) = (&src[(c * t_in + i0) * px..][..px], &src[(c * t_in + i1) * px..][..px]);
            let a = E::from_f64(a);
            data.extend(f0.iter().zip(f1).map(|(&x0, &x1)| x0 + a * (x1 - x0)));
        }
    }
    let bvp = pos.iter().map(|&(i0, i1, a)| s.bvp[i0] + a * (s.bvp[i1] - s.bvp[i0])).collect();
    Ok(Sample { x: Tensor::new(vec![3, t_out, sh[2], sh[3]], data)?, bvp, hr: s.hr * factor })
}

/// Temporal resampling factors used by [`augment`].
pub const SPEED_FACTORS: [f64; 3] = [0.8, 1.0, 1.25];

/// Random horizontal flip (p = 0.5) and temporal resampling by a factor
/// from [`SPEED_FACTORS`]. A resampling that would leave fewer than
/// `min_frames` frames or push the heart rate out of the class band is
/// skipped.
pub fn augment<E: Element>(s: &Sample<E>, rng: &mut Rng, min_frames: usize) -> Result<Sample<E>> {
    let flip = rng.bernoulli(0.5);
    let factor = SPEED_FACTORS[rng.below(SPEED_FACTORS.len())];
    let mut out = if flip { flip_horizontal(s) } else { s.clone() };
    let hr = s.hr * factor;
    let t_out = ((s.x.shape()[1] - 1) as f64 / factor + 1e-9).floor() as usize + 1;
    if factor != 1.0 && t_out >= min_frames && (HR_MIN as f64..=HR_MAX as f64).contains(&hr) {
        out = resample_temporal(&out, factor)?;
    }
    Ok(out)
}

/// A training sample of `frames` frames from `clip`: random start, random
/// flip, random speed factor. The source window is long enough that
/// the resampled sample has exactly `frames` frames; factors that do not
/// fit the clip or the class band fall back to 1.
pub fn training_sample<E: Element>(clip: &Clip, frames: usize, rng: &mut Rng, augmented: bool) -> Result<Sample<E>> {
    let (flip, mut factor) = if augmented {
        (rng.bernoulli(0.5), SPEED_FACTORS[rng.below(SPEED_FACTORS.len())])
    } else {
        (false, 1.0)
    };
    let need = |f: f64| ((frames - 1) as f64 * f).ceil() as usize + 1;
    let band = (HR_MIN as f64)..=(HR_MAX as f64);
    if need(factor) > clip.frames || !band.contains(&(clip.hr * factor)) {
        factor = 1.0;
    }
    let len = need(factor);
    if len > clip.frames {
        return Err(config_err!("clip {} has {} frames, samples need {frames}", clip.id, clip.frames));
    }
    let start = rng.below(clip.frames - len + 1);
    let mut s = clip.window(start, len)?;
    if factor != 1.0 {
        s = resample_temporal(&s, factor)?;
        if s.x.shape()[1] != frames {
            s = truncate(&s, frames)?;
        }
    }
    Ok(if flip { flip_horizontal(&s) } else { s })
}

fn truncate<E: Element>(s: &Sample<E>, frames: usize) -> Result<Sample<E>> {
    let sh = s.x.shape();
    let px = sh[2] * sh[3];
    let t = sh[1];
    let mut data = Vec::with_capacity(3 * frames * px);
    for c in 0..3 {
        data.extend_from_slice(&s.x.data()[c * t * px..(c * t + frames) * px]);
    }
    Ok(Sample { x: Tensor::new(vec![3, frames, sh[2], sh[3]], data)?, bvp: s.bvp[..frames].to_vec(), hr: s.hr })
}
