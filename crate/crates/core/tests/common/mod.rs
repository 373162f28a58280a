//! Brute-force reference implementations written directly from the
//! defining formulas, with no shared code beyond plain `Vec<f64>`.

#![allow(dead_code)]

use std::f64::consts::PI;

/// Row-major offset of `idx` in `shape`.
pub fn at(shape: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

/// Max over elements of `|a - b| / max(1, |b|)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

/// Direct 3-D convolution of `[B,Ci,T,H,W]` with `[Co,Ci,kt,kh,kw]`.
pub fn conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [b, ci, t, h, wd] = xs;
    let [co, _, kt, kh, kw] = ws;
    let o = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
    let os = [b, co, o(t, kt, stride[0], pad[0]), o(h, kh, stride[1], pad[1]), o(wd, kw, stride[2], pad[2])];
    let mut y = vec![0.0; os.iter().product()];
    for n in 0..b {
        for c in 0..co {
            for ot in 0..os[2] {
                for oh in 0..os[3] {
                    for ow in 0..os[4] {
                        let mut acc = bias.map_or(0.0, |bb| bb[c]);
                        for i in 0..ci {
                            for a in 0..kt {
                                for bq in 0..kh {
                                    for cq in 0..kw {
                                        let it = (ot * stride[0] + a) as isize - pad[0] as isize;
                                        let ih = (oh * stride[1] + bq) as isize - pad[1] as isize;
                                        let iw = (ow * stride[2] + cq) as isize - pad[2] as isize;
                                        if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= wd as isize {
                                            continue;
                                        }
                                        let xv = x[at(&xs, &[n, i, it as usize, ih as usize, iw as usize])];
                                        acc += xv * w[at(&ws, &[c, i, a, bq, cq])];
                                    }
                                }
                            }
                        }
                        y[at(&os, &[n, c, ot, oh, ow])] = acc;
                    }
                }
            }
        }
    }
    (y, os)
}

/// Depthwise convolution: channel `c` of the input with kernel `[c, 0]`.
pub fn depthwise_conv3d(x: &[f64], xs: [usize; 5], w: &[f64], k: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> (Vec<f64>, [usize; 5]) {
    let [b, c, t, h, wd] = xs;
    let mut out = Vec::new();
    let mut os = [0; 5];
    let per = k[0] * k[1] * k[2];
    let mut parts = Vec::new();
    for ch in 0..c {
        let mut xc = Vec::new();
        for n in 0..b {
            let s = at(&xs, &[n, ch, 0, 0, 0]);
            xc.push(x[s..s + t * h * wd].to_vec());
        }
        let xc: Vec<f64> = xc.concat();
        let (y, s) = conv3d(&xc, [b, 1, t, h, wd], &w[ch * per..(ch + 1) * per], [1, 1, k[0], k[1], k[2]], None, stride, pad);
        os = [b, c, s[2], s[3], s[4]];
        parts.push(y);
    }
    let plane = os[2] * os[3] * os[4];
    for n in 0..b {
        for p in &parts {
            out.extend_from_slice(&p[n * plane..(n + 1) * plane]);
        }
    }
    (out, os)
}

/// `[n, k] × [k, m]` for each of `batch` leading slices of `a` (and `b`
/// when `b_batched`).
pub fn matmul(a: &[f64], b: &[f64], batch: usize, n: usize, k: usize, m: usize, b_batched: bool) -> Vec<f64> {
    let mut y = vec![0.0; batch * n * m];
    for s in 0..batch {
        let bo = if b_batched { s * k * m } else { 0 };
        for i in 0..n {
            for j in 0..m {
                y[(s * n + i) * m + j] = (0..k).map(|q| a[(s * n + i) * k + q] * b[bo + q * m + j]).sum();
            }
        }
    }
    y
}

/// Temporal difference convolution straight from its definition:
/// `Σ_R w·x(p0+pn) − θ·x(p0)·Σ_R' w`, where `R'` is the two outer temporal
/// slices and `x(p0)` the input at the kernel centre.
pub fn tdc(x: &[f64], xs: [usize; 5], w: &[f64], ws: [usize; 5], theta: f64, stride: [usize; 3], pad: [usize; 3]) -> (Vec<f64>, [usize; 5]) {
    let (mut y, os) = conv3d(x, xs, w, ws, None, stride, pad);
    let [_, ci, _, kh, kw] = ws;
    let [b, co, ot, oh, ow] = os;
    for n in 0..b {
        for c in 0..co {
            for t in 0..ot {
                for hh in 0..oh {
                    for ww in 0..ow {
                        let ct = (t * stride[0] + 1) as isize - pad[0] as isize;
                        let ch = (hh * stride[1] + kh / 2) as isize - pad[1] as isize;
                        let cw = (ww * stride[2] + kw / 2) as isize - pad[2] as isize;
                        if ct < 0 || ch < 0 || cw < 0 || ct >= xs[2] as isize || ch >= xs[3] as isize || cw >= xs[4] as isize {
                            continue;
                        }
                        let mut diff = 0.0;
                        for i in 0..ci {
                            let mut outer = 0.0;
                            for a in [0, 2] {
                                for bq in 0..kh {
                                    for cq in 0..kw {
                                        outer += w[at(&ws, &[c, i, a, bq, cq])];
                                    }
                                }
                            }
                            diff += outer * x[at(&xs, &[n, i, ct as usize, ch as usize, cw as usize])];
                        }
                        y[at(&os, &[n, c, t, hh, ww])] -= theta * diff;
                    }
                }
            }
        }
    }
    (y, os)
}

fn softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `[B, L, D]` tokens; head `h` owns channels `h·D/heads..`.
pub struct Tokens<'a> {
    pub data: &'a [f64],
    pub len: usize,
    pub dim: usize,
}

impl Tokens<'_> {
    fn head(&self, b: usize, i: usize, h: usize, dh: usize) -> &[f64] {
        let s = (b * self.len + i) * self.dim + h * dh;
        &self.data[s..s + dh]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One attention term per head: `softmax((q·k + extra)/τ)·v`, accumulated
/// into `ctx` `[B, Lq, D]`.
fn attend_into(ctx: &mut [f64], q: &Tokens, k: &Tokens, v: &Tokens, batch: usize, heads: usize, tau: f64, extra: &dyn Fn(usize, usize, usize, usize) -> f64) {
    let dh = q.dim / heads;
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..q.len {
                let logits: Vec<f64> = (0..k.len).map(|j| dot(q.head(b, i, h, dh), k.head(b, j, h, dh)) + extra(b, h, i, j)).collect();
                let p = softmax(&logits, tau);
                for (j, pj) in p.iter().enumerate() {
                    for d in 0..dh {
                        ctx[(b * q.len + i) * q.dim + h * dh + d] += pj * v.head(b, j, h, dh)[d];
                    }
                }
            }
        }
    }
}

fn project_out(ctx: &[f64], rows: usize, dim: usize, u: &[f64], ub: &[f64]) -> Vec<f64> {
    let mut y = matmul(ctx, u, 1, rows, dim, dim, false);
    for r in 0..rows {
        for d in 0..dim {
            y[r * dim + d] += ub[d];
        }
    }
    y
}

pub fn mhsa(q: &Tokens, k: &Tokens, v: &Tokens, batch: usize, heads: usize, tau: f64, u: &[f64], ub: &[f64]) -> Vec<f64> {
    let mut ctx = vec![0.0; batch * q.len * q.dim];
    attend_into(&mut ctx, q, k, v, batch, heads, tau, &|_, _, _, _| 0.0);
    project_out(&ctx, batch * q.len, q.dim, u, ub)
}

#[allow(clippy::too_many_arguments)]
pub fn mhcsa(q: &Tokens, kf: &Tokens, vf: &Tokens, ks: &Tokens, vs: &Tokens, batch: usize, heads: usize, tau: f64, u: &[f64], ub: &[f64]) -> Vec<f64> {
    let mut ctx = vec![0.0; batch * q.len * q.dim];
    attend_into(&mut ctx, q, ks, vs, batch, heads, tau, &|_, _, _, _| 0.0);
    attend_into(&mut ctx, q, kf, vf, batch, heads, tau, &|_, _, _, _| 0.0);
    project_out(&ctx, batch * q.len, q.dim, u, ub)
}

/// `S[b,h,i,j] = q_i · R[c + (j − i)]` with the table centred at row `c`.
pub fn periodic_logits(q: &Tokens, table: &[f64], rows: usize, batch: usize, heads: usize) -> Vec<f64> {
    let dh = q.dim / heads;
    let centre = (rows / 2) as isize;
    let l = q.len;
    let mut s = vec![0.0; batch * heads * l * l];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..l {
                for j in 0..l {
                    let r = (centre + j as isize - i as isize) as usize;
                    s[((b * heads + h) * l + i) * l + j] = dot(q.head(b, i, h, dh), &table[r * dh..(r + 1) * dh]);
                }
            }
        }
    }
    s
}

#[allow(clippy::too_many_arguments)]
pub fn mhpsa(q: &Tokens, k: &Tokens, v: &Tokens, table: &[f64], rows: usize, batch: usize, heads: usize, tau: f64, lambda: f64, u: &[f64], ub: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s = periodic_logits(q, table, rows, batch, heads);
    let l = q.len;
    let mut ctx = vec![0.0; batch * l * q.dim];
    attend_into(&mut ctx, q, k, v, batch, heads, tau, &|b, h, i, j| lambda * s[((b * heads + h) * l + i) * l + j]);
    (project_out(&ctx, batch * l, q.dim, u, ub), s)
}

/// Mean over `g × g` blocks of each trailing `L × L` map.
pub fn block_mean(s: &[f64], maps: usize, l: usize, g: usize) -> Vec<f64> {
    let m = l / g;
    let mut out = vec![0.0; maps * m * m];
    for p in 0..maps {
        for i in 0..l {
            for j in 0..l {
                out[(p * m + i / g) * m + j / g] += s[(p * l + i) * l + j] / (g * g) as f64;
            }
        }
    }
    out
}

pub fn peak_map(p: &[u8]) -> Vec<u8> {
    let n = p.len();
    let mut pm = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            pm[i * n + j] = u8::from(p[i] == 1 && p[j] == 1);
        }
    }
    pm
}

pub fn block_max(pm: &[u8], t: usize, ts: usize) -> Vec<u8> {
    let g = t / ts;
    let mut out = vec![0u8; ts * ts];
    for i in 0..t {
        for j in 0..t {
            let o = &mut out[(i / g) * ts + j / g];
            *o = (*o).max(pm[i * t + j]);
        }
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Hann-windowed power of the mean-removed signal at 42..=180 bpm.
pub fn psd(y: &[f64], fps: f64) -> Vec<f64> {
    let n = y.len();
    let m = y.iter().sum::<f64>() / n as f64;
    (42..=180)
        .map(|bpm| {
            let f = bpm as f64 / 60.0;
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in y.iter().enumerate() {
                let w = 0.5 - 0.5 * (2.0 * PI * t as f64 / (n - 1) as f64).cos();
                let ph = 2.0 * PI * f * t as f64 / fps;
                re += w * (v - m) * ph.cos();
                im += w * (v - m) * ph.sin();
            }
            re * re + im * im
        })
        .collect()
}

pub fn standardize(y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    y.iter().map(|v| (v - m) / sd).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn cross_entropy(logits: &[f64], class: usize) -> f64 {
    -log_softmax(logits)[class]
}

/// `Σ p·(ln p − log_softmax(q))`, skipping zero-mass bins.
pub fn kl(p: &[f64], logits: &[f64]) -> f64 {
    let lq = log_softmax(logits);
    p.iter().zip(&lq).filter(|(pi, _)| **pi > 0.0).map(|(pi, l)| pi * (pi.ln() - l)).sum()
}

/// Gaussian over 42..=180 centred at `hr`, normalized to unit mass.
pub fn label_distribution(hr: f64, sigma: f64) -> Vec<f64> {
    let raw: Vec<f64> = (42..=180).map(|b| (-(b as f64 - hr).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

pub fn bce_logits(x: f64, y: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}
