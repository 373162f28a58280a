//! Layout operations: reshape, permute, concat, selection, resampling and
//! the index remaps used by relative attention.

use super::{Tape, Var};
use crate::error::{dim_err, param_err, Result};
use crate::tensor::{numel, Element, Tensor};

/// Interpolation used by [`Tape::temporal_upsample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    /// Linear interpolation with half-pixel centres and edge clamping.
    Linear,
}

impl<E: Element> Tape<E> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        self.record("reshape", out, &[x], |ins, _, g| vec![Some(g.reshape(ins[0].shape().to_vec()).expect("reshape"))])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.record("permute", out, &[x], move |_, _, g| vec![Some(g.permute(&inverse).expect("permute"))])
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(dim_err!("transpose axes ({a},{b}) out of range for {:?}", self.shape(x)));
        }
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(dim_err!("concat along {axis}: {base:?} vs {s:?}"));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in xs.iter().zip(&sizes) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.record("concat", out, xs, move |ins, _, g| {
            let mut grads: Vec<Vec<E>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &sz) in grads.iter_mut().zip(&sizes) {
                    gi.extend_from_slice(&gd[off..off + sz * inner]);
                    off += sz * inner;
                }
            }
            grads
                .into_iter()
                .zip(ins)
                .map(|(d, t)| Some(Tensor::new(t.shape().to_vec(), d).expect("concat grad")))
                .collect()
        })
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(dim_err!("narrow {start}..{} on axis {axis} of {s:?}", start + len));
        }
        if start == 0 && len == s[axis] {
            return Ok(x);
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let full = s[axis];
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&xd[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.record("narrow", out, &[x], move |ins, _, g| {
            let mut d = vec![E::ZERO; ins[0].len()];
            for (o, chunk) in g.data().chunks_exact(len * inner).enumerate() {
                d[(o * full + start) * inner..(o * full + start + len) * inner].copy_from_slice(chunk);
            }
            vec![Some(Tensor::new(ins[0].shape().to_vec(), d).expect("narrow grad"))]
        })
    }

    /// Sub-tensor `index` along the leading axis (drops that axis).
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let out = self.value(x).index_axis0(index)?;
        let inner = out.len();
        self.record("select", out, &[x], move |ins, _, g| {
            let mut d = vec![E::ZERO; ins[0].len()];
            d[index * inner..(index + 1) * inner].copy_from_slice(g.data());
            vec![Some(Tensor::new(ins[0].shape().to_vec(), d).expect("select grad"))]
        })
    }

    /// Mean over the two trailing (spatial) axes of a `[B, C, T, H, W]`
    /// tensor, giving `[B, C, T]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(dim_err!("spatial_mean expects [B,C,T,H,W], got {s:?}"));
        }
        let plane = s[3] * s[4];
        let inv = E::from_f64(1.0 / plane as f64);
        let data: Vec<E> = self.value(x).data().chunks_exact(plane).map(|c| c.iter().copied().sum::<E>() * inv).collect();
        let out = Tensor::new(vec![s[0], s[1], s[2]], data)?;
        self.record("spatial_mean", out, &[x], move |ins, _, g| {
            let mut d = Vec::with_capacity(ins[0].len());
            for &v in g.data() {
                d.extend(std::iter::repeat(v * inv).take(plane));
            }
            vec![Some(Tensor::new(ins[0].shape().to_vec(), d).expect("spatial_mean grad"))]
        })
    }

    /// Upsamples axis 2 of `[B, C, T, H, W]` by an integer factor.
    pub fn temporal_upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(dim_err!("temporal_upsample expects [B,C,T,H,W], got {s:?}"));
        }
        if factor == 0 {
            return Err(param_err!("upsample factor must be positive"));
        }
        let (t_in, plane) = (s[2], s[3] * s[4]);
        let t_out = t_in * factor;
        // Each output frame is a weighted sum of at most two input frames.
        let taps: Vec<[(usize, f64); 2]> = (0..t_out)
            .map(|o| match mode {
                UpsampleMode::Nearest => [(o / factor, 1.0), (0, 0.0)],
                UpsampleMode::Linear => {
                    let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (t_in - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(t_in - 1);
                    let frac = src - i0 as f64;
                    [(i0, 1.0 - frac), (i1, frac)]
                }
            })
            .collect();
        let outer = s[0] * s[1];
        let xd = self.value(x).data();
        let mut data = vec![E::ZERO; outer * t_out * plane];
        for c in 0..outer {
            for (o, tap) in taps.iter().enumerate() {
                let dst = &mut data[(c * t_out + o) * plane..(c * t_out + o + 1) * plane];
                for &(i, wgt) in tap {
                    if wgt == 0.0 {
                        continue;
                    }
                    let wgt = E::from_f64(wgt);
                    let src = &xd[(c * t_in + i) * plane..(c * t_in + i + 1) * plane];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += wgt * v;
                    }
                }
            }
        }
        let mut shape = s.clone();
        shape[2] = t_out;
        let out = Tensor::new(shape, data)?;
        self.record("temporal_upsample", out, &[x], move |ins, _, g| {
            let mut d = vec![E::ZERO; ins[0].len()];
            let gd = g.data();
            for c in 0..outer {
                for (o, tap) in taps.iter().enumerate() {
                    let src = &gd[(c * t_out + o) * plane..(c * t_out + o + 1) * plane];
                    for &(i, wgt) in tap {
                        if wgt == 0.0 {
                            continue;
                        }
                        let wgt = E::from_f64(wgt);
                        let dst = &mut d[(c * t_in + i) * plane..(c * t_in + i + 1) * plane];
                        for (a, &v) in dst.iter_mut().zip(src) {
                            *a += wgt * v;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(ins[0].shape().to_vec(), d).expect("upsample grad"))]
        })
    }

    /// Relative-logit skew: `[.., L, 2L-1] → [.., L, L]` with
    /// `out[i][j] = x[i][j - i + L - 1]`.
    ///
    /// Column `c` of the input holds the logit for signed offset
    /// `c - (L-1)`; the skew moves each row so that column `j` of the
    /// output holds the logit for the pair `(i, j)`. This is the step that
    /// avoids materializing an `L × L × D` table of relative embeddings.
    pub fn rel_skew(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if r < 2 || s[r - 1] != 2 * s[r - 2] - 1 {
            return Err(dim_err!("rel_skew expects [.., L, 2L-1], got {s:?}"));
        }
        let l = s[r - 2];
        let w = 2 * l - 1;
        let outer = numel(&s[..r - 2]);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * l * l);
        for o in 0..outer {
            for i in 0..l {
                let row = &xd[(o * l + i) * w..(o * l + i + 1) * w];
                data.extend_from_slice(&row[l - 1 - i..2 * l - 1 - i]);
            }
        }
        let mut shape = s[..r - 2].to_vec();
        shape.extend_from_slice(&[l, l]);
        let out = Tensor::new(shape, data)?;
        self.record("rel_skew", out, &[x], move |ins, _, g| {
            let mut d = vec![E::ZERO; ins[0].len()];
            let gd = g.data();
            for o in 0..outer {
                for i in 0..l {
                    let dst = &mut d[(o * l + i) * w + l - 1 - i..(o * l + i) * w + 2 * l - 1 - i];
                    dst.copy_from_slice(&gd[(o * l + i) * l..(o * l + i + 1) * l]);
                }
            }
            vec![Some(Tensor::new(ins[0].shape().to_vec(), d).expect("skew grad"))]
        })
    }

    /// Block mean over the two trailing axes: `[.., L, L] → [.., L/g, L/g]`
    /// where each output cell averages a `g × g` block. Token `i` belongs to
    /// block `i / g`.
    pub fn block_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if r < 2 || s[r - 1] != s[r - 2] {
            return Err(dim_err!("block_mean expects [.., L, L], got {s:?}"));
        }
        let l = s[r - 1];
        if group == 0 || l % group != 0 {
            return Err(dim_err!("block_mean: {l} tokens not divisible by group {group}"));
        }
        let t = l / group;
        let outer = numel(&s[..r - 2]);
        let inv = E::from_f64(1.0 / (group * group) as f64);
        let xd = self.value(x).data();
        let mut data = vec![E::ZERO; outer * t * t];
        for o in 0..outer {
            for i in 0..l {
                for j in 0..l {
                    data[(o * t + i / group) * t + j / group] += xd[(o * l + i) * l + j];
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s[..r - 2].to_vec();
        shape.extend_from_slice(&[t, t]);
        let out = Tensor::new(shape, data)?;
        self.record("block_mean", out, &[x], move |ins, _, g| {
            let gd = g.data();
            let d = Tensor::from_fn(ins[0].shape().to_vec(), |idx| {
                let o = idx / (l * l);
                let (i, j) = ((idx / l) % l, idx % l);
                gd[(o * t + i / group) * t + j / group] * inv
            });
            vec![Some(d)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_upsample_interpolates_and_clamps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![1, 1, 2, 1, 1], &[0.0, 4.0]).unwrap());
        let y = tape.temporal_upsample(x, 2, UpsampleMode::Linear).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 3.0, 4.0]);
        let n = tape.temporal_upsample(x, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(tape.value(n).data(), &[0.0, 0.0, 4.0, 4.0]);
    }

    #[test]
    fn skew_places_offsets() {
        // row i, column c holds 10*i + (c - (L-1))
        let l = 3;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![l, 2 * l - 1], |k| {
            let (i, c) = (k / (2 * l - 1), k % (2 * l - 1));
            10.0 * i as f64 + c as f64 - (l - 1) as f64
        }));
        let s = tape.rel_skew(x).unwrap();
        for i in 0..l {
            for j in 0..l {
                assert_eq!(tape.value(s).data()[i * l + j], 10.0 * i as f64 + j as f64 - i as f64);
            }
        }
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(vec![2, 1, 2]));
        let b = tape.leaf(Tensor::ones(vec![2, 2, 2]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        let w = tape.constant(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
        let p = tape.mul(c, w).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }
}
