//! Physiological measurements from (predicted) pulse signals and the
//! evaluation metrics computed over a test set.
//!
//! Heart rate is the PSD argmax over the integer-bpm classes of
//! [`crate::loss`]. HRV comes from the inter-beat-interval tachogram:
//! peaks are refined to sub-sample positions, the tachogram is resampled at
//! 4 Hz, and its spectrum is split into LF (0.04–0.15 Hz) and HF
//! (0.15–0.4 Hz) power reported in normalized units. Respiration is the
//! tachogram's dominant frequency in 0.1–0.5 Hz.
//!
//! ```
//! use physformer::signal::{clip_protocol_hr, estimate_hr};
//!
//! let fps = 30.0;
//! let tone: Vec<f64> = (0..300).map(|t| (2.0 * std::f64::consts::PI * 1.2 * t as f64 / fps).sin()).collect();
//! assert_eq!(estimate_hr(&tone, fps)?.bpm, 72.0);
//! let long: Vec<f64> = tone.iter().cycle().take(900).copied().collect();
//! assert_eq!(clip_protocol_hr(&long, fps)?, 72.0);
//! # Ok::<(), physformer::Error>(())
//! ```

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::loss::{find_peaks, PsdBasis, HR_MAX, HR_MIN, NUM_CLASSES};

/// Shortest clip accepted for a heart-rate estimate, in seconds.
pub const MIN_CLIP_S: f64 = 10.0;
/// Length of the evaluation videos split by [`clip_protocol_hr`].
pub const PROTOCOL_S: f64 = 30.0;
pub const LF_BAND: (f64, f64) = (0.04, 0.15);
pub const HF_BAND: (f64, f64) = (0.15, 0.4);
pub const RF_BAND: (f64, f64) = (0.1, 0.5);
/// Tachogram resampling rate in Hz.
pub const TACHO_HZ: f64 = 4.0;

/// A heart-rate estimate. `out_of_band` flags signals whose dominant
/// rhythm, searched from 6 bpm up to Nyquist, lies outside the class band;
/// `bpm` is then only the best in-band class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrEstimate {
    pub bpm: f64,
    pub out_of_band: bool,
}

pub fn estimate_hr(y: &[f64], fps: f64) -> Result<HrEstimate> {
    if (y.len() as f64) < MIN_CLIP_S * fps - 1e-9 {
        return Err(Error::Protocol(format!(
            "{} samples at {fps} fps is shorter than {MIN_CLIP_S} s",
            y.len()
        )));
    }
    hr_from_psd(y, fps)
}

/// PSD-argmax heart rate without the clip-length check.
pub fn hr_from_psd(y: &[f64], fps: f64) -> Result<HrEstimate> {
    let p = PsdBasis::<f64>::new(y.len(), fps)?.psd_values(y)?;
    let k = (0..NUM_CLASSES).fold(0, |best, k| if p[k] > p[best] { k } else { best });
    Ok(HrEstimate { bpm: (HR_MIN + k) as f64, out_of_band: !(HR_MIN..=HR_MAX).contains(&dominant_bpm(y, fps)) })
}

/// Integer-bpm argmax of the mean-removed, Hann-windowed spectrum from
/// 6 bpm to Nyquist.
fn dominant_bpm(y: &[f64], fps: f64) -> usize {
    let n = y.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(t, v)| (v - mean) * (0.5 - 0.5 * (2.0 * PI * t as f64 / (n - 1) as f64).cos()))
        .collect();
    let mut best = (0, f64::MIN);
    for bpm in 6..=(fps * 30.0).floor() as usize {
        let w = 2.0 * PI * bpm as f64 / 60.0 / fps;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            re += v * (w * t as f64).cos();
            im += v * (w * t as f64).sin();
        }
        let p = re * re + im * im;
        if p > best.1 {
            best = (bpm, p);
        }
    }
    best.0
}

/// Mean of the three 10 s estimates of a 30 s signal.
pub fn clip_protocol_hr(y: &[f64], fps: f64) -> Result<f64> {
    let expected = (PROTOCOL_S * fps).round() as usize;
    if y.len() != expected {
        return Err(Error::Protocol(format!("protocol needs {expected} samples ({PROTOCOL_S} s), got {}", y.len())));
    }
    segment_hr(y, fps, 3)
}

/// Mean heart rate over `segments` equal consecutive segments, each at
/// least [`MIN_CLIP_S`] long.
pub fn segment_hr(y: &[f64], fps: f64, segments: usize) -> Result<f64> {
    if segments == 0 {
        return Err(param_err!("need at least one segment"));
    }
    let len = y.len() / segments;
    let mut total = 0.0;
    for s in 0..segments {
        total += estimate_hr(&y[s * len..(s + 1) * len], fps)?.bpm;
    }
    Ok(total / segments as f64)
}

/// Heart rate by the evaluation protocol: three segments for a 30 s signal,
/// otherwise as many whole 10 s segments as fit.
pub fn protocol_hr(y: &[f64], fps: f64) -> Result<f64> {
    if y.len() == (PROTOCOL_S * fps).round() as usize {
        return clip_protocol_hr(y, fps);
    }
    let segments = (y.len() as f64 / (MIN_CLIP_S * fps) + 1e-9).floor() as usize;
    if segments == 0 {
        return Err(Error::Protocol(format!("{} samples at {fps} fps is shorter than {MIN_CLIP_S} s", y.len())));
    }
    segment_hr(y, fps, segments)
}

/// HR, respiration and HRV features of one signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysioEstimate {
    pub hr_bpm: f64,
    pub rf_hz: f64,
    /// Raw tachogram band powers in ms².
    pub lf_power: f64,
    pub hf_power: f64,
    pub lf_un: f64,
    pub hf_un: f64,
    pub lf_hf_ratio: f64,
    pub ibi_ms: Vec<f64>,
}

pub fn hrv_features(y: &[f64], fps: f64) -> Result<PhysioEstimate> {
    let peaks = refined_peaks(y, fps);
    if peaks.len() < 5 {
        return Err(Error::InsufficientSignal(format!("{} peaks found, need at least 5", peaks.len())));
    }
    let hr_bpm = estimate_hr(y, fps)?.bpm;
    let ibi_ms: Vec<f64> = peaks.windows(2).map(|w| (w[1] - w[0]) / fps * 1000.0).collect();
    let times: Vec<f64> = peaks[1..].iter().map(|p| p / fps).collect();
    let tacho = resample_linear(&times, &ibi_ms, TACHO_HZ);
    let mean = tacho.iter().sum::<f64>() / tacho.len() as f64;
    let centred: Vec<f64> = tacho.iter().map(|v| v - mean).collect();
    let band = |(lo, hi): (f64, f64)| spectrum(&centred, TACHO_HZ, lo, hi);
    let lf: f64 = band(LF_BAND).iter().map(|(_, p)| p).sum();
    let hf: f64 = band(HF_BAND).iter().map(|(_, p)| p).sum();
    let total = lf + hf;
    // A flat tachogram splits evenly so that the normalized units still sum to 1.
    let (lf_un, hf_un) = if total > 1e-12 { (lf / total, hf / total) } else { (0.5, 0.5) };
    let rf_hz = band(RF_BAND).into_iter().fold((RF_BAND.0, f64::MIN), |b, (f, p)| if p > b.1 { (f, p) } else { b }).0;
    Ok(PhysioEstimate {
        hr_bpm,
        rf_hz,
        lf_power: lf,
        hf_power: hf,
        lf_un,
        hf_un,
        lf_hf_ratio: lf_un / hf_un,
        ibi_ms,
    })
}

/// Peak positions in samples, refined by a parabola through each maximum
/// and its neighbours.
pub fn refined_peaks(y: &[f64], fps: f64) -> Vec<f64> {
    find_peaks(y, (0.33 * fps).round() as usize)
        .into_iter()
        .map(|i| {
            let (a, b, c) = (y[i - 1], y[i], y[i + 1]);
            let den = a - 2.0 * b + c;
            if den.abs() > 1e-15 { i as f64 + 0.5 * (a - c) / den } else { i as f64 }
        })
        .collect()
}

/// Samples the piecewise-linear curve through `(t, v)` every `1/hz` seconds
/// from the first to the last knot.
fn resample_linear(t: &[f64], v: &[f64], hz: f64) -> Vec<f64> {
    let n = ((t[t.len() - 1] - t[0]) * hz).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let x = t[0] + i as f64 / hz;
        while j + 2 < t.len() && t[j + 1] < x {
            j += 1;
        }
        let span = t[j + 1] - t[j];
        let a = if span > 0.0 { ((x - t[j]) / span).clamp(0.0, 1.0) } else { 0.0 };
        out.push(v[j] + a * (v[j + 1] - v[j]));
    }
    out
}

/// Hann-windowed periodogram on a 0.005 Hz grid within `[lo, hi)`.
fn spectrum(x: &[f64], hz: f64, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let n = x.len();
    let w: Vec<f64> = (0..n).map(|t| 0.5 - 0.5 * (2.0 * PI * t as f64 / (n.max(2) - 1) as f64).cos()).collect();
    let steps = ((hi - lo) / 0.005).round() as usize;
    (0..steps)
        .map(|s| {
            let f = lo + s as f64 * 0.005;
            let (mut re, mut im) = (0.0, 0.0);
            for (t, (&v, &wt)) in x.iter().zip(&w).enumerate() {
                let ph = 2.0 * PI * f * t as f64 / hz;
                re += v * wt * ph.cos();
                im += v * wt * ph.sin();
            }
            (f, (re * re + im * im) / n as f64)
        })
        .collect()
}

/// Aggregate error statistics of heart-rate predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Sample standard deviation of the signed error.
    pub sd: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Pearson correlation; `None` when either list is constant.
    pub r: Option<f64>,
}

pub fn metrics(pred: &[f64], gt: &[f64]) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(param_err!("{} predictions for {} ground-truth values", pred.len(), gt.len()));
    }
    let n = pred.len();
    if n < 2 {
        return Err(param_err!("metrics need at least two pairs, got {n}"));
    }
    let nf = n as f64;
    let err: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
    let me = err.iter().sum::<f64>() / nf;
    let sd = (err.iter().map(|e| (e - me).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let mae = err.iter().map(|e| e.abs()).sum::<f64>() / nf;
    let rmse = (err.iter().map(|e| e * e).sum::<f64>() / nf).sqrt();
    let (mp, mg) = (pred.iter().sum::<f64>() / nf, gt.iter().sum::<f64>() / nf);
    let cov: f64 = pred.iter().zip(gt).map(|(p, g)| (p - mp) * (g - mg)).sum();
    let vp: f64 = pred.iter().map(|p| (p - mp).powi(2)).sum();
    let vg: f64 = gt.iter().map(|g| (g - mg).powi(2)).sum();
    let r = (vp > 0.0 && vg > 0.0).then(|| (cov / (vp * vg).sqrt()).clamp(-1.0, 1.0));
    Ok(Metrics { sd, mae, rmse, r })
}

/// Per-clip outcome in a [`Report`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub clip_id: String,
    pub gt_hr: f64,
    pub pred_hr: f64,
    pub abs_error: f64,
}

/// Evaluation report: per-clip results plus aggregate metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub clips: Vec<ClipResult>,
    pub metrics: Metrics,
}

impl Report {
    pub fn new(method: impl Into<String>, clips: Vec<ClipResult>) -> Result<Self> {
        let pred: Vec<f64> = clips.iter().map(|c| c.pred_hr).collect();
        let gt: Vec<f64> = clips.iter().map(|c| c.gt_hr).collect();
        let metrics = metrics(&pred, &gt)?;
        Ok(Self { method: method.into(), clips, metrics })
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        Ok(())
    }

    /// One-row summary table: `method,sd,mae,rmse,r`.
    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let m = &self.metrics;
        let r = m.r.map(|r| r.to_string()).unwrap_or_default();
        writeln!(out, "method,sd,mae,rmse,r")?;
        writeln!(out, "{},{},{},{},{r}", self.method, m.sd, m.mae, m.rmse)?;
        Ok(())
    }

    /// Per-clip table: `clip_id,gt_hr,pred_hr,abs_error`.
    pub fn write_clips_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "clip_id,gt_hr,pred_hr,abs_error")?;
        for c in &self.clips {
            writeln!(out, "{},{},{},{}", c.clip_id, c.gt_hr, c.pred_hr, c.abs_error)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(bpm: f64, fps: f64, n: usize) -> Vec<f64> {
        (0..n).map(|t| (2.0 * PI * bpm / 60.0 * t as f64 / fps).sin()).collect()
    }

    #[test]
    fn short_clips_are_rejected() {
        assert!(matches!(estimate_hr(&tone(72.0, 30.0, 200), 30.0), Err(Error::Protocol(_))));
        assert!(matches!(clip_protocol_hr(&tone(72.0, 30.0, 600), 30.0), Err(Error::Protocol(_))));
    }

    #[test]
    fn out_of_band_tone_is_flagged() {
        let e = estimate_hr(&tone(30.0, 30.0, 600), 30.0).unwrap();
        assert!(e.out_of_band);
        assert!(!estimate_hr(&tone(72.0, 30.0, 300), 30.0).unwrap().out_of_band);
    }

    #[test]
    fn protocol_averages_segments() {
        let mut y = tone(60.0, 30.0, 300);
        y.extend(tone(66.0, 30.0, 300));
        y.extend(tone(72.0, 30.0, 300));
        assert_eq!(clip_protocol_hr(&y, 30.0).unwrap(), 66.0);
    }

    #[test]
    fn periodic_signal_has_flat_tachogram() {
        let f = hrv_features(&tone(60.0, 30.0, 900), 30.0).unwrap();
        assert!(f.ibi_ms.iter().all(|v| (v - 1000.0).abs() < 1.0));
        assert!(f.lf_power < 1e-3 && f.hf_power < 1e-3);
        assert!((f.lf_un + f.hf_un - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_peaks_is_insufficient() {
        assert!(matches!(hrv_features(&tone(60.0, 30.0, 120), 30.0), Err(Error::InsufficientSignal(_))));
    }

    #[test]
    fn metric_hand_values() {
        let m = metrics(&[70.0, 80.0], &[75.0, 75.0]).unwrap();
        assert_eq!((m.mae, m.rmse), (5.0, 5.0));
        assert_eq!(m.r, None);
        let same = metrics(&[60.0, 70.0, 90.0], &[60.0, 70.0, 90.0]).unwrap();
        assert_eq!((same.mae, same.rmse, same.r), (0.0, 0.0, Some(1.0)));
        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
    }
}
