//! Training losses: negative Pearson in time, frequency cross-entropy and
//! label-distribution KL on the PSD, BCE supervision of periodic attention,
//! and the curriculum-weighted aggregate.
//!
//! Heart rates are classified into [`NUM_CLASSES`] integer bins covering
//! [`HR_MIN`]..=[`HR_MAX`] bpm; class index `k` (0-based) is `HR_MIN + k` bpm.
//!
//! ```
//! use physformer::loss::{LossWeights, Schedule};
//!
//! let w = LossWeights::default();
//! assert_eq!(w.beta(1, 25), 1.0);
//! assert!((w.beta(25, 25) - 5f64.powf(24.0 / 25.0)).abs() < 1e-12);
//! assert_eq!(LossWeights { schedule: Schedule::Fixed, ..w }.beta(25, 25), 1.0);
//! ```

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, dim_err, param_err, Error, Result};
use crate::tensor::{Element, Tensor};

pub const HR_MIN: usize = 42;
pub const HR_MAX: usize = 180;
pub const NUM_CLASSES: usize = HR_MAX - HR_MIN + 1;

/// Class index of the nearest integer heart rate.
pub fn hr_class(hr_bpm: f64) -> Result<usize> {
    let r = hr_bpm.round();
    if !(HR_MIN as f64..=HR_MAX as f64).contains(&r) {
        return Err(param_err!("heart rate {hr_bpm} bpm is outside [{HR_MIN}, {HR_MAX}]"));
    }
    Ok(r as usize - HR_MIN)
}

/// Hann-windowed, mean-removed DFT basis at the class frequencies.
///
/// `power = (x·C)² + (x·S)²` for a row `x` of length `T`; mean removal and
/// the window are linear in `x` and are folded into `C` and `S`.
#[derive(Clone, Debug)]
pub struct PsdBasis<E: Element = f32> {
    pub cos: Tensor<E>,
    pub sin: Tensor<E>,
    pub frames: usize,
    pub fps: f64,
}

impl<E: Element> PsdBasis<E> {
    pub fn new(frames: usize, fps: f64) -> Result<Self> {
        if !(fps > 2.0 * HR_MAX as f64 / 60.0) {
            return Err(config_err!("fps {fps} cannot represent {HR_MAX} bpm"));
        }
        if (frames as f64) < fps * 60.0 / HR_MIN as f64 {
            return Err(Error::Protocol(format!("{frames} frames at {fps} fps hold less than one {HR_MIN} bpm cycle")));
        }
        let n = frames;
        let window: Vec<f64> = (0..n).map(|t| 0.5 - 0.5 * (2.0 * PI * t as f64 / (n - 1) as f64).cos()).collect();
        let mut cos = vec![0.0; n * NUM_CLASSES];
        let mut sin = vec![0.0; n * NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            let f = (HR_MIN + k) as f64 / 60.0;
            let (mut cm, mut sm) = (0.0, 0.0);
            for t in 0..n {
                let ph = 2.0 * PI * f * t as f64 / fps;
                cos[t * NUM_CLASSES + k] = window[t] * ph.cos();
                sin[t * NUM_CLASSES + k] = window[t] * ph.sin();
                cm += cos[t * NUM_CLASSES + k];
                sm += sin[t * NUM_CLASSES + k];
            }
            // (x - mean)·b = x·(b - mean(b))
            for t in 0..n {
                cos[t * NUM_CLASSES + k] -= cm / n as f64;
                sin[t * NUM_CLASSES + k] -= sm / n as f64;
            }
        }
        Ok(Self {
            cos: Tensor::from_f64(vec![n, NUM_CLASSES], &cos)?,
            sin: Tensor::from_f64(vec![n, NUM_CLASSES], &sin)?,
            frames,
            fps,
        })
    }

    /// Raw per-class power of `y` (`[.., T]` → `[.., 139]`).
    pub fn psd(&self, tape: &mut Tape<E>, y: Var) -> Result<Var> {
        let t = *tape.shape(y).last().unwrap_or(&0);
        if t != self.frames {
            return Err(dim_err!("PSD basis built for {} frames, got {t}", self.frames));
        }
        let c = tape.constant(self.cos.clone());
        let s = tape.constant(self.sin.clone());
        let re = tape.matmul(y, c)?;
        let im = tape.matmul(y, s)?;
        let re2 = tape.mul(re, re)?;
        let im2 = tape.mul(im, im)?;
        tape.add(re2, im2)
    }

    /// Non-differentiable per-class power of one signal.
    pub fn psd_values(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.frames {
            return Err(dim_err!("PSD basis built for {} frames, got {}", self.frames, y.len()));
        }
        let (c, s) = (self.cos.to_f64_vec(), self.sin.to_f64_vec());
        Ok((0..NUM_CLASSES)
            .map(|k| {
                let re: f64 = y.iter().enumerate().map(|(t, v)| v * c[t * NUM_CLASSES + k]).sum();
                let im: f64 = y.iter().enumerate().map(|(t, v)| v * s[t * NUM_CLASSES + k]).sum();
                re * re + im * im
            })
            .collect())
    }
}

/// Raw per-class PSD of `y_hat` at `fps`.
pub fn psd_distribution<E: Element>(tape: &mut Tape<E>, y_hat: Var, fps: f64) -> Result<Var> {
    let t = *tape.shape(y_hat).last().ok_or_else(|| dim_err!("empty signal"))?;
    PsdBasis::new(t, fps)?.psd(tape, y_hat)
}

/// Cross-entropy of `softmax(p_hat)` against the one-hot class per row.
pub fn freq_ce<E: Element>(tape: &mut Tape<E>, p_hat: Var, classes: &[usize]) -> Result<Var> {
    let target = one_hot::<E>(classes)?;
    let shaped = target.reshape(tape.shape(p_hat).to_vec())?;
    let ce = tape.soft_cross_entropy(p_hat, &shaped)?;
    tape.mean(ce)
}

fn one_hot<E: Element>(classes: &[usize]) -> Result<Tensor<E>> {
    let mut t = Tensor::zeros(vec![classes.len(), NUM_CLASSES]);
    for (r, &c) in classes.iter().enumerate() {
        if c >= NUM_CLASSES {
            return Err(param_err!("class index {c} outside [0, {}]", NUM_CLASSES - 1));
        }
        t.data_mut()[r * NUM_CLASSES + c] = E::from_f64(1.0);
    }
    Ok(t)
}

/// Gaussian label distribution over the heart-rate classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution {
    pub p: Vec<f64>,
    pub sigma: f64,
}

/// `p_k ∝ exp(-(k - c)² / 2σ²) / (√(2π) σ)` with `c` the class of `hr_bpm`,
/// renormalized over the truncated support.
pub fn label_distribution(hr_bpm: f64, sigma: f64) -> Result<LabelDistribution> {
    if !(HR_MIN as f64..=HR_MAX as f64).contains(&hr_bpm) {
        return Err(param_err!("heart rate {hr_bpm} bpm is outside [{HR_MIN}, {HR_MAX}]"));
    }
    if !(sigma > 0.0) {
        return Err(param_err!("sigma must be positive, got {sigma}"));
    }
    let centre = hr_bpm - HR_MIN as f64;
    let raw: Vec<f64> = (0..NUM_CLASSES)
        .map(|k| (-(k as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp() / ((2.0 * PI).sqrt() * sigma))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(LabelDistribution { p: raw.iter().map(|v| v / total).collect(), sigma })
}

/// `KL(p ‖ softmax(p_hat))` averaged over rows.
pub fn ld_loss<E: Element>(tape: &mut Tape<E>, dists: &[LabelDistribution], p_hat: Var) -> Result<Var> {
    let flat: Vec<f64> = dists.iter().flat_map(|d| d.p.iter().copied()).collect();
    let target = Tensor::from_f64(tape.shape(p_hat).to_vec(), &flat)
        .map_err(|_| dim_err!("{} label distributions for PSD of shape {:?}", dists.len(), tape.shape(p_hat)))?;
    let ce = tape.soft_cross_entropy(p_hat, &target)?;
    let ce = tape.mean(ce)?;
    let entropy: f64 = dists.iter().map(|d| d.p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()).sum();
    tape.add_scalar(ce, entropy / dists.len() as f64)
}

/// Binary peak indicator of a ground-truth BVP trace.
///
/// Local maxima (plateaus resolve to their left-middle sample) are kept in
/// order of decreasing height unless closer than `round(0.33·fps)` samples
/// to an already kept peak; every kept index is widened by ±3 samples.
pub fn peak_signal(y: &[f64], fps: f64) -> Vec<u8> {
    let peaks = find_peaks(y, (0.33 * fps).round() as usize);
    let mut p = vec![0u8; y.len()];
    for i in peaks {
        let lo = i.saturating_sub(3);
        let hi = (i + 3).min(y.len() - 1);
        p[lo..=hi].iter_mut().for_each(|v| *v = 1);
    }
    p
}

/// Indices of local maxima at least `distance` samples apart, ascending.
pub fn find_peaks(y: &[f64], distance: usize) -> Vec<usize> {
    let mut cands = Vec::new();
    let n = y.len();
    let mut i = 1;
    while i + 1 < n {
        if y[i] > y[i - 1] {
            let mut j = i;
            while j + 1 < n && y[j + 1] == y[i] {
                j += 1;
            }
            if j + 1 < n && y[j + 1] < y[i] {
                cands.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    let mut order = cands.clone();
    order.sort_by(|&a, &b| y[b].total_cmp(&y[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in order {
        if kept.iter().all(|&k| k.abs_diff(c) >= distance.max(1)) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

/// `PM = P Pᵀ` as a row-major `T × T` binary matrix.
pub fn peak_map(p: &[u8]) -> Result<Vec<u8>> {
    if let Some(v) = p.iter().find(|&&v| v > 1) {
        return Err(Error::Contract(format!("peak signal must be binary, found {v}")));
    }
    Ok(p.iter().flat_map(|&a| p.iter().map(move |&b| a & b)).collect())
}

/// Block-max pooling of a `T × T` map to `T' × T'`.
pub fn subsample_pm(pm: &[u8], t: usize, t_sub: usize) -> Result<Vec<u8>> {
    if pm.len() != t * t {
        return Err(dim_err!("peak map has {} entries, expected {t}²", pm.len()));
    }
    if t_sub == 0 || t % t_sub != 0 {
        return Err(config_err!("cannot subsample a {t}×{t} peak map to {t_sub}×{t_sub}"));
    }
    let g = t / t_sub;
    let mut out = vec![0u8; t_sub * t_sub];
    for i in 0..t {
        for j in 0..t {
            out[(i / g) * t_sub + j / g] |= pm[i * t + j];
        }
    }
    Ok(out)
}

/// Subsampled peak maps `[B, T', T']` for a batch of BVP traces `[B, T]`.
pub fn batch_peak_maps<E: Element>(bvp: &Tensor<E>, fps: f64, t_sub: usize) -> Result<Tensor<E>> {
    let s = bvp.shape();
    if s.len() != 2 {
        return Err(dim_err!("expected BVP [B, T], got {s:?}"));
    }
    let (b, t) = (s[0], s[1]);
    let mut data = Vec::with_capacity(b * t_sub * t_sub);
    for row in bvp.to_f64_vec().chunks_exact(t) {
        let pm = peak_map(&peak_signal(row, fps))?;
        data.extend(subsample_pm(&pm, t, t_sub)?.into_iter().map(|v| v as f64));
    }
    Tensor::from_f64(vec![b, t_sub, t_sub], &data)
}

/// Mean BCE of `sigmoid(S')` against `PM'` over every head and every
/// periodic block. Maps are `[B, h, T', T']`, targets `[B, T', T']`.
pub fn atten_loss<E: Element>(tape: &mut Tape<E>, maps: &[Var], pm_sub: &Tensor<E>) -> Result<Var> {
    if maps.is_empty() {
        return Err(config_err!("attention loss needs at least one periodic map"));
    }
    let ts = pm_sub.shape().to_vec();
    let mut terms = Vec::with_capacity(maps.len());
    for &m in maps {
        let s = tape.shape(m).to_vec();
        if s.len() != 4 || s[0] != ts[0] || s[2..] != ts[1..] {
            return Err(dim_err!("periodic map {s:?} does not match peak maps {ts:?}"));
        }
        let per = s[2] * s[3];
        let src = pm_sub.data();
        let target = Tensor::from_fn(s.clone(), |i| src[(i / (s[1] * per)) * per + i % per]);
        terms.push(tape.bce_with_logits(m, &target)?);
    }
    tape.mean_of(&terms)
}

/// How `β` grows over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `β₀·η^((e−1)/E)`.
    Exponential,
    /// `β₀·(1 + (η−1)(e−1)/E)`.
    Linear,
    /// `β₀`.
    Fixed,
}

/// Loss weights and the `β` curriculum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta0: f64,
    pub eta: f64,
    /// Standard deviation of the label distribution.
    pub sigma: f64,
    pub schedule: Schedule,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta0: 1.0, eta: 5.0, sigma: 1.0, schedule: Schedule::Exponential }
    }
}

impl LossWeights {
    /// `β` at 1-based `epoch` of `total`.
    pub fn beta(&self, epoch: usize, total: usize) -> f64 {
        let x = (epoch.max(1) - 1) as f64 / total.max(1) as f64;
        match self.schedule {
            Schedule::Exponential => self.beta0 * self.eta.powf(x),
            Schedule::Linear => self.beta0 * (1.0 + (self.eta - 1.0) * x),
            Schedule::Fixed => self.beta0,
        }
    }
}

/// Ground truth for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a, E: Element> {
    /// `[B, T]`.
    pub bvp: &'a Tensor<E>,
    pub hr: &'a [f64],
    pub fps: f64,
}

/// The recorded total and the value of each term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub time: f64,
    pub beta: f64,
    pub ce: f64,
    pub ld: f64,
    /// Zero when no periodic maps are supplied.
    pub atten: f64,
}

/// `α·L_time + β·(L_CE + L_LD) + L_atten`.
///
/// The frequency terms use the PSD of the standardized prediction,
/// normalized to unit mass, as logits. `L_atten` is included only when
/// `periodic_maps` is non-empty.
pub fn overall_loss<E: Element>(
    tape: &mut Tape<E>,
    y_hat: Var,
    targets: Targets<'_, E>,
    periodic_maps: &[Var],
    weights: &LossWeights,
    epoch: usize,
    total_epochs: usize,
) -> Result<LossTerms> {
    let s = tape.shape(y_hat).to_vec();
    if s.len() != 2 || s[0] != targets.hr.len() {
        return Err(dim_err!("prediction {s:?} does not match {} heart-rate labels", targets.hr.len()));
    }
    let time = tape.neg_pearson(y_hat, targets.bvp)?;
    let time = tape.mean(time)?;
    let z = tape.standardize(y_hat)?;
    let power = psd_distribution(tape, z, targets.fps)?;
    let p_hat = tape.normalize_sum(power)?;
    let classes = targets.hr.iter().map(|&h| hr_class(h)).collect::<Result<Vec<_>>>()?;
    let ce = freq_ce(tape, p_hat, &classes)?;
    let dists = targets.hr.iter().map(|&h| label_distribution(h, weights.sigma)).collect::<Result<Vec<_>>>()?;
    let ld = ld_loss(tape, &dists, p_hat)?;
    let beta = weights.beta(epoch, total_epochs);
    let a = tape.scale(time, weights.alpha)?;
    let freq = tape.add(ce, ld)?;
    let freq = tape.scale(freq, beta)?;
    let mut total = tape.add(a, freq)?;
    let mut atten = 0.0;
    if !periodic_maps.is_empty() {
        let t_sub = tape.shape(periodic_maps[0])[2];
        let pm = batch_peak_maps(targets.bvp, targets.fps, t_sub)?;
        let l = atten_loss(tape, periodic_maps, &pm)?;
        atten = tape.value(l).data()[0].to_f64();
        total = tape.add(total, l)?;
    }
    let v = |tape: &Tape<E>, x: Var| tape.value(x).data()[0].to_f64();
    Ok(LossTerms { total, time: v(tape, time), beta, ce: v(tape, ce), ld: v(tape, ld), atten })
}

/// One row of the loss-curve CSV (epoch means).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    /// `α·L_time`.
    pub alpha_term: f64,
    pub beta: f64,
    pub ce: f64,
    pub ld: f64,
    pub atten: f64,
    pub total: f64,
}

pub const CURVE_HEADER: &str = "epoch,alpha_term,beta,ce,ld,atten,total";

pub fn write_curves<W: Write>(mut out: W, rows: &[CurveRow]) -> Result<()> {
    writeln!(out, "{CURVE_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{},{}", r.epoch, r.alpha_term, r.beta, r.ce, r.ld, r.atten, r.total)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(bpm: f64, fps: f64, n: usize) -> Vec<f64> {
        (0..n).map(|t| (2.0 * PI * bpm / 60.0 * t as f64 / fps).sin()).collect()
    }

    #[test]
    fn tone_peaks_at_its_class() {
        let basis = PsdBasis::<f64>::new(300, 30.0).unwrap();
        for bpm in (50..=170).step_by(10) {
            let p = basis.psd_values(&tone(bpm as f64, 30.0, 300)).unwrap();
            let arg = (0..NUM_CLASSES).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            assert_eq!(arg + HR_MIN, bpm);
        }
    }

    #[test]
    fn constant_signal_has_no_power() {
        let basis = PsdBasis::<f64>::new(300, 30.0).unwrap();
        let p = basis.psd_values(&[3.0; 300]).unwrap();
        assert!(p.iter().all(|v| v.abs() < 1e-18));
    }

    #[test]
    fn psd_rejects_low_fps_and_short_clips() {
        assert!(matches!(PsdBasis::<f64>::new(300, 5.0), Err(Error::Config(_))));
        assert!(matches!(PsdBasis::<f64>::new(20, 30.0), Err(Error::Protocol(_))));
    }

    #[test]
    fn label_distribution_anchor() {
        let d = label_distribution(100.0, 1.0).unwrap();
        let arg = (0..NUM_CLASSES).max_by(|&a, &b| d.p[a].total_cmp(&d.p[b])).unwrap();
        assert_eq!(arg + HR_MIN, 100);
        assert!((d.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Interior bins lose nothing to truncation, so renormalization is
        // a near no-op and the peak keeps the unnormalized density.
        assert!((d.p[arg] - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-6);
        assert!(label_distribution(41.0, 1.0).is_err());
    }

    #[test]
    fn triangular_pulse_marks_seven_samples() {
        let y: Vec<f64> = (0..30).map(|t| 10.0 - (t as f64 - 10.0).abs()).collect();
        let p = peak_signal(&y, 30.0);
        let ones: Vec<usize> = (0..30).filter(|&i| p[i] == 1).collect();
        assert_eq!(ones, (7..=13).collect::<Vec<_>>());
        let ramp: Vec<f64> = (0..30).map(|t| t as f64).collect();
        assert!(peak_signal(&ramp, 30.0).iter().all(|&v| v == 0));
    }

    #[test]
    fn peak_map_and_subsampling() {
        let pm = peak_map(&[0, 1, 0, 1]).unwrap();
        let ones: Vec<usize> = (0..16).filter(|&i| pm[i] == 1).collect();
        assert_eq!(ones, vec![5, 7, 13, 15]);
        assert!(peak_map(&[0, 2]).is_err());
        let mut single = vec![0u8; 64];
        single[5 * 8 + 5] = 1;
        assert_eq!(subsample_pm(&single, 8, 2).unwrap(), vec![0, 0, 0, 1]);
        assert!(subsample_pm(&single, 8, 3).is_err());
    }

    #[test]
    fn beta_schedule_endpoints() {
        let w = LossWeights::default();
        assert_eq!(w.beta(1, 25), 1.0);
        assert!((w.beta(25, 25) - 4.688255).abs() < 1e-6);
        let flat = LossWeights { eta: 1.0, ..w };
        assert!((1..=25).all(|e| flat.beta(e, 25) == 1.0));
    }
}
