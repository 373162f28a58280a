//! 3D convolution kernels (cross-correlation convention, zero padding).
//!
//! Dense convolution lowers each batch item to im2col + GEMM. The column
//! buffer is built a few output frames at a time so memory stays bounded at
//! full resolution. Batch items run in parallel; weight gradients are
//! reduced in item order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Element, MatView, Tensor};

/// Soft cap on im2col buffer size, in elements.
const COL_CHUNK_ELEMS: usize = 1 << 22;

/// Shape bookkeeping for one dense or depthwise 3D convolution.
///
/// Padding is signed: a negative pad crops the input symmetrically, which is
/// how the temporal-difference branch of TDC addresses the centre tap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [isize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// `x`: `[B, C_in, T, H, W]`; `w`: `[C_out, C_in_per_group, kt, kh, kw]`.
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: [usize; 3],
        pad: [isize; 3],
        depthwise: bool,
    ) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(dim_err!("conv3d expects 5-D input and weight, got {x_shape:?} and {w_shape:?}"));
        }
        let c_in = x_shape[1];
        let expected_w_in = if depthwise { 1 } else { c_in };
        if w_shape[1] != expected_w_in || (depthwise && w_shape[0] != c_in) {
            return Err(dim_err!(
                "conv3d channel mismatch: input {x_shape:?} vs weight {w_shape:?}{}",
                if depthwise { " (depthwise)" } else { "" }
            ));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(dim_err!("conv3d stride must be positive, got {stride:?}"));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = x_shape[2 + a] as isize + 2 * pad[a];
            let k = w_shape[2 + a] as isize;
            if padded < k {
                return Err(dim_err!(
                    "conv3d kernel {:?} larger than padded input {:?} (pad {:?})",
                    &w_shape[2..],
                    &x_shape[2..],
                    pad
                ));
            }
            output[a] = ((padded - k) / stride[a] as isize + 1) as usize;
        }
        Ok(Self {
            batch: x_shape[0],
            c_in,
            c_out: w_shape[0],
            input: [x_shape[2], x_shape[3], x_shape[4]],
            kernel: [w_shape[2], w_shape[3], w_shape[4]],
            stride,
            pad,
            output,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    fn in_item(&self) -> usize {
        self.c_in * self.input.iter().product::<usize>()
    }

    fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn k_dense(&self) -> usize {
        self.c_in * self.taps()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Output frames per im2col chunk.
    fn frames_per_chunk(&self) -> usize {
        let per_frame = self.k_dense() * self.output[1] * self.output[2];
        (COL_CHUNK_ELEMS / per_frame.max(1)).clamp(1, self.output[0])
    }

    /// Range of output indices `o` along one axis whose input index
    /// `o*stride + k - pad` falls inside `[0, len)`.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.stride[axis] as isize;
        let off = k as isize - self.pad[axis];
        let len = self.input[axis] as isize;
        let n = self.output[axis] as isize;
        // o*s + off >= 0  and  o*s + off < len
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if len - off <= 0 { 0 } else { ((len - off + s - 1) / s).min(n) };
        (lo.clamp(0, n) as usize, hi.max(lo).clamp(0, n) as usize)
    }

    /// Fills `cols` (`[K, frames*Ho*Wo]`) for output frames `t0..t0+frames`.
    fn im2col<E: Element>(&self, x: &[E], t0: usize, frames: usize, cols: &mut [E]) {
        let [t_in, h_in, w_in] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let [_, ho, wo] = self.output;
        let plane = ho * wo;
        let pc = frames * plane;
        let mut row = 0;
        for ci in 0..self.c_in {
            let xc = &x[ci * t_in * h_in * w_in..(ci + 1) * t_in * h_in * w_in];
            for dt in 0..kt {
                for dy in 0..kh {
                    let (ylo, yhi) = self.valid_range(1, dy);
                    for dx in 0..kw {
                        let (xlo, xhi) = self.valid_range(2, dx);
                        let dst = &mut cols[row * pc..(row + 1) * pc];
                        for f in 0..frames {
                            let to = t0 + f;
                            let ti = (to * st + dt) as isize - pt;
                            let dframe = &mut dst[f * plane..(f + 1) * plane];
                            if ti < 0 || ti >= t_in as isize {
                                dframe.fill(E::ZERO);
                                continue;
                            }
                            let src_t = &xc[ti as usize * h_in * w_in..(ti as usize + 1) * h_in * w_in];
                            for oy in 0..ho {
                                let drow = &mut dframe[oy * wo..(oy + 1) * wo];
                                if oy < ylo || oy >= yhi {
                                    drow.fill(E::ZERO);
                                    continue;
                                }
                                let yi = (oy * sh + dy) as isize - ph;
                                let src_row = &src_t[yi as usize * w_in..(yi as usize + 1) * w_in];
                                drow[..xlo].fill(E::ZERO);
                                drow[xhi..].fill(E::ZERO);
                                if xhi > xlo {
                                    let x0 = ((xlo * sw + dx) as isize - pw) as usize;
                                    if sw == 1 {
                                        drow[xlo..xhi].copy_from_slice(&src_row[x0..x0 + (xhi - xlo)]);
                                    } else {
                                        for (j, d) in drow[xlo..xhi].iter_mut().enumerate() {
                                            *d = src_row[x0 + j * sw];
                                        }
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into `dx` (adjoint of [`Self::im2col`]).
    fn col2im<E: Element>(&self, cols: &[E], t0: usize, frames: usize, dx: &mut [E]) {
        let [t_in, h_in, w_in] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let [_, ho, wo] = self.output;
        let plane = ho * wo;
        let pc = frames * plane;
        let mut row = 0;
        for ci in 0..self.c_in {
            let xc = &mut dx[ci * t_in * h_in * w_in..(ci + 1) * t_in * h_in * w_in];
            for dt in 0..kt {
                for dy in 0..kh {
                    let (ylo, yhi) = self.valid_range(1, dy);
                    for dxk in 0..kw {
                        let (xlo, xhi) = self.valid_range(2, dxk);
                        let src = &cols[row * pc..(row + 1) * pc];
                        row += 1;
                        if xhi <= xlo {
                            continue;
                        }
                        for f in 0..frames {
                            let ti = ((t0 + f) * st + dt) as isize - pt;
                            if ti < 0 || ti >= t_in as isize {
                                continue;
                            }
                            let sframe = &src[f * plane..(f + 1) * plane];
                            let dst_t = &mut xc[ti as usize * h_in * w_in..(ti as usize + 1) * h_in * w_in];
                            for oy in ylo..yhi {
                                let yi = (oy * sh + dy) as isize - ph;
                                let dst_row = &mut dst_t[yi as usize * w_in..(yi as usize + 1) * w_in];
                                let x0 = ((xlo * sw + dxk) as isize - pw) as usize;
                                let srow = &sframe[oy * wo + xlo..oy * wo + xhi];
                                for (j, &v) in srow.iter().enumerate() {
                                    dst_row[x0 + j * sw] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense 3D convolution. `bias`, when given, has length `C_out`.
pub fn conv3d_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    g: &ConvGeom,
) -> Tensor<E> {
    let p = g.out_positions();
    let k = g.k_dense();
    let in_item = g.in_item();
    let out_item = g.c_out * p;
    let mut out = vec![E::ZERO; g.batch * out_item];
    let wd = w.data();
    let fpc = g.frames_per_chunk();
    let plane = g.output[1] * g.output[2];
    out.par_chunks_mut(out_item).enumerate().for_each(|(b, ob)| {
        let xb = &x.data()[b * in_item..(b + 1) * in_item];
        if g.is_pointwise() {
            gemm(E::ONE, wd, MatView::row_major(g.c_out, k), xb, MatView::row_major(k, p), E::ZERO, ob, MatView::row_major(g.c_out, p));
        } else {
            let mut cols = vec![E::ZERO; k * fpc * plane];
            let mut t0 = 0;
            while t0 < g.output[0] {
                let frames = fpc.min(g.output[0] - t0);
                let pc = frames * plane;
                g.im2col(xb, t0, frames, &mut cols[..k * pc]);
                let ov = MatView { rows: g.c_out, cols: pc, row_stride: p as isize, col_stride: 1 };
                gemm(E::ONE, wd, MatView::row_major(g.c_out, k), &cols[..k * pc], MatView::row_major(k, pc), E::ZERO, &mut ob[t0 * plane..], ov);
                t0 += frames;
            }
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut ob[co * p..(co + 1) * p] {
                    *v += bv;
                }
            }
        }
    });
    Tensor::new(g.out_shape(), out).expect("conv3d output shape")
}

/// Gradients of [`conv3d_forward`]: `(dx, dw, dbias)`; `dx` only when asked.
pub fn conv3d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gout: &Tensor<E>,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<E>>, Tensor<E>, Tensor<E>) {
    let p = g.out_positions();
    let k = g.k_dense();
    let in_item = g.in_item();
    let out_item = g.c_out * p;
    let fpc = g.frames_per_chunk();
    let plane = g.output[1] * g.output[2];
    let wd = w.data();

    let per_item: Vec<(Option<Vec<E>>, Vec<E>, Vec<E>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x.data()[b * in_item..(b + 1) * in_item];
            let gb = &gout.data()[b * out_item..(b + 1) * out_item];
            let mut dw = vec![E::ZERO; g.c_out * k];
            let mut dx = if need_dx { Some(vec![E::ZERO; in_item]) } else { None };
            let db: Vec<E> = (0..g.c_out).map(|co| gb[co * p..(co + 1) * p].iter().copied().sum()).collect();
            if g.is_pointwise() {
                // dw = gout · xᵀ ; dx = wᵀ · gout
                gemm(E::ONE, gb, MatView::row_major(g.c_out, p), xb, MatView::row_major(k, p).t(), E::ZERO, &mut dw, MatView::row_major(g.c_out, k));
                if let Some(dx) = dx.as_mut() {
                    gemm(E::ONE, wd, MatView::row_major(g.c_out, k).t(), gb, MatView::row_major(g.c_out, p), E::ZERO, dx, MatView::row_major(k, p));
                }
            } else {
                let mut cols = vec![E::ZERO; k * fpc * plane];
                let mut t0 = 0;
                while t0 < g.output[0] {
                    let frames = fpc.min(g.output[0] - t0);
                    let pc = frames * plane;
                    let gv = MatView { rows: g.c_out, cols: pc, row_stride: p as isize, col_stride: 1 };
                    let gchunk = &gb[t0 * plane..];
                    g.im2col(xb, t0, frames, &mut cols[..k * pc]);
                    gemm(E::ONE, gchunk, gv, &cols[..k * pc], MatView::row_major(k, pc).t(), E::ONE, &mut dw, MatView::row_major(g.c_out, k));
                    if let Some(dx) = dx.as_mut() {
                        gemm(E::ONE, wd, MatView::row_major(g.c_out, k).t(), gchunk, gv, E::ZERO, &mut cols[..k * pc], MatView::row_major(k, pc));
                        g.col2im(&cols[..k * pc], t0, frames, dx);
                    }
                    t0 += frames;
                }
            }
            (dx, dw, db)
        })
        .collect();

    let mut dw = vec![E::ZERO; g.c_out * k];
    let mut db = vec![E::ZERO; g.c_out];
    let mut dx = if need_dx { Some(Vec::with_capacity(g.batch * in_item)) } else { None };
    for (dxb, dwb, dbb) in per_item {
        for (a, b) in dw.iter_mut().zip(dwb) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(dbb) {
            *a += b;
        }
        if let (Some(dx), Some(dxb)) = (dx.as_mut(), dxb) {
            dx.extend_from_slice(&dxb);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("dx shape")),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![g.c_out], db).expect("db shape"),
    )
}

/// Depthwise 3D convolution; `w` is `[C, 1, kt, kh, kw]`.
pub fn depthwise_forward<E: Element>(x: &Tensor<E>, w: &Tensor<E>, g: &ConvGeom) -> Tensor<E> {
    let [t_in, h_in, w_in] = g.input;
    let [to, ho, wo] = g.output;
    let taps = g.taps();
    let vol_in = t_in * h_in * w_in;
    let vol_out = to * ho * wo;
    let mut out = vec![E::ZERO; g.batch * g.c_in * vol_out];
    out.par_chunks_mut(vol_out).enumerate().for_each(|(bc, oc)| {
        let c = bc % g.c_in;
        let xc = &x.data()[bc * vol_in..(bc + 1) * vol_in];
        let wc = &w.data()[c * taps..(c + 1) * taps];
        depthwise_accumulate(g, xc, wc, oc);
    });
    Tensor::new(vec![g.batch, g.c_in, to, ho, wo], out).expect("depthwise output shape")
}

fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    // f(tap index, input flat offset, output flat offset) for every valid pair
    let [_, h_in, w_in] = g.input;
    let [to, ho, wo] = g.output;
    let [kt, kh, kw] = g.kernel;
    let mut tap = 0;
    for dt in 0..kt {
        let (tlo, thi) = g.valid_range(0, dt);
        for dy in 0..kh {
            let (ylo, yhi) = g.valid_range(1, dy);
            for dx in 0..kw {
                let (xlo, xhi) = g.valid_range(2, dx);
                for ot in tlo..thi.min(to) {
                    let ti = ((ot * g.stride[0] + dt) as isize - g.pad[0]) as usize;
                    for oy in ylo..yhi.min(ho) {
                        let yi = ((oy * g.stride[1] + dy) as isize - g.pad[1]) as usize;
                        for ox in xlo..xhi.min(wo) {
                            let xi = ((ox * g.stride[2] + dx) as isize - g.pad[2]) as usize;
                            f(tap, (ti * h_in + yi) * w_in + xi, (ot * ho + oy) * wo + ox);
                        }
                    }
                }
                tap += 1;
            }
        }
    }
}

fn depthwise_accumulate<E: Element>(g: &ConvGeom, xc: &[E], wc: &[E], oc: &mut [E]) {
    for_each_tap(g, |tap, i, o| oc[o] += wc[tap] * xc[i]);
}

/// Gradients of [`depthwise_forward`]: `(dx, dw)`.
pub fn depthwise_backward<E: Element>(x: &Tensor<E>, w: &Tensor<E>, gout: &Tensor<E>, g: &ConvGeom) -> (Tensor<E>, Tensor<E>) {
    let taps = g.taps();
    let vol_in = g.input.iter().product::<usize>();
    let vol_out = g.output.iter().product::<usize>();
    let per_bc: Vec<(Vec<E>, Vec<E>)> = (0..g.batch * g.c_in)
        .into_par_iter()
        .map(|bc| {
            let c = bc % g.c_in;
            let xc = &x.data()[bc * vol_in..(bc + 1) * vol_in];
            let gc = &gout.data()[bc * vol_out..(bc + 1) * vol_out];
            let wc = &w.data()[c * taps..(c + 1) * taps];
            let mut dx = vec![E::ZERO; vol_in];
            let mut dw = vec![E::ZERO; taps];
            for_each_tap(g, |tap, i, o| {
                dx[i] += wc[tap] * gc[o];
                dw[tap] += xc[i] * gc[o];
            });
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![E::ZERO; w.len()];
    for (bc, (dxc, dwc)) in per_bc.into_iter().enumerate() {
        dx.extend_from_slice(&dxc);
        let c = bc % g.c_in;
        for (a, b) in dw[c * taps..(c + 1) * taps].iter_mut().zip(dwc) {
            *a += b;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
    )
}

/// Transposed convolution along the temporal axis only.
///
/// `x`: `[B, C_in, T, H, W]`, `w`: `[C_in, C_out, k]`; output length is
/// `(T-1)*stride - 2*pad + k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalTransposeGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub plane: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub t_out: usize,
}

impl TemporalTransposeGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 3 || x_shape[1] != w_shape[0] {
            return Err(dim_err!("transposed temporal conv: input {x_shape:?} vs weight {w_shape:?}"));
        }
        let full = (x_shape[2] - 1) * stride + w_shape[2];
        if stride == 0 || full <= 2 * pad {
            return Err(dim_err!("transposed temporal conv: stride {stride}, pad {pad} leave no output"));
        }
        Ok(Self {
            batch: x_shape[0],
            c_in: x_shape[1],
            c_out: w_shape[1],
            t_in: x_shape[2],
            plane: x_shape[3] * x_shape[4],
            kernel: w_shape[2],
            stride,
            pad,
            t_out: full - 2 * pad,
        })
    }

    /// `(t_in, tap, t_out)` for every contributing triple.
    fn pairs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.t_in).flat_map(move |t| {
            (0..self.kernel).filter_map(move |kk| {
                let o = (t * self.stride + kk) as isize - self.pad as isize;
                (o >= 0 && (o as usize) < self.t_out).then_some((t, kk, o as usize))
            })
        })
    }

    fn w_view(&self, kk: usize) -> (usize, MatView) {
        // w[ci, co, kk] as a [C_in, C_out] matrix
        (kk, MatView { rows: self.c_in, cols: self.c_out, row_stride: (self.c_out * self.kernel) as isize, col_stride: self.kernel as isize })
    }

    fn frame_view(&self, channels: usize, t_len: usize) -> MatView {
        MatView { rows: channels, cols: self.plane, row_stride: (t_len * self.plane) as isize, col_stride: 1 }
    }
}

pub fn temporal_transpose_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    g: &TemporalTransposeGeom,
) -> Tensor<E> {
    let in_item = g.c_in * g.t_in * g.plane;
    let out_item = g.c_out * g.t_out * g.plane;
    let mut out = vec![E::ZERO; g.batch * out_item];
    out.par_chunks_mut(out_item).enumerate().for_each(|(b, ob)| {
        let xb = &x.data()[b * in_item..(b + 1) * in_item];
        for (t, kk, o) in g.pairs() {
            let (off, wv) = g.w_view(kk);
            gemm(
                E::ONE,
                &w.data()[off..],
                wv.t(),
                &xb[t * g.plane..],
                g.frame_view(g.c_in, g.t_in),
                E::ONE,
                &mut ob[o * g.plane..],
                g.frame_view(g.c_out, g.t_out),
            );
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut ob[co * g.t_out * g.plane..(co + 1) * g.t_out * g.plane] {
                    *v += bv;
                }
            }
        }
    });
    Tensor::new(vec![g.batch, g.c_out, g.t_out, x.shape()[3], x.shape()[4]], out).expect("output shape")
}

/// Gradients of [`temporal_transpose_forward`]: `(dx, dw, dbias)`.
pub fn temporal_transpose_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gout: &Tensor<E>,
    g: &TemporalTransposeGeom,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let in_item = g.c_in * g.t_in * g.plane;
    let out_item = g.c_out * g.t_out * g.plane;
    let per_item: Vec<(Vec<E>, Vec<E>, Vec<E>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x.data()[b * in_item..(b + 1) * in_item];
            let gb = &gout.data()[b * out_item..(b + 1) * out_item];
            let mut dx = vec![E::ZERO; in_item];
            let mut dw = vec![E::ZERO; w.len()];
            for (t, kk, o) in g.pairs() {
                let (off, wv) = g.w_view(kk);
                // dx[:, t] += w[:, :, kk] · gout[:, o]
                gemm(E::ONE, &w.data()[off..], wv, &gb[o * g.plane..], g.frame_view(g.c_out, g.t_out), E::ONE, &mut dx[t * g.plane..], g.frame_view(g.c_in, g.t_in));
                // dw[:, :, kk] += x[:, t] · gout[:, o]ᵀ
                gemm(E::ONE, &xb[t * g.plane..], g.frame_view(g.c_in, g.t_in), &gb[o * g.plane..], g.frame_view(g.c_out, g.t_out).t(), E::ONE, &mut dw[off..], wv);
            }
            let db = (0..g.c_out)
                .map(|co| gb[co * g.t_out * g.plane..(co + 1) * g.t_out * g.plane].iter().copied().sum())
                .collect();
            (dx, dw, db)
        })
        .collect();
    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![E::ZERO; w.len()];
    let mut db = vec![E::ZERO; g.c_out];
    for (dxb, dwb, dbb) in per_item {
        dx.extend_from_slice(&dxb);
        for (a, b) in dw.iter_mut().zip(dwb) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(dbb) {
            *a += b;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![g.c_out], db).expect("db shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Seven-deep direct loop, the reference for the im2col path.
    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: [usize; 3], pad: [isize; 3]) -> Tensor<f64> {
        let g = ConvGeom::new(x.shape(), w.shape(), stride, pad, false).unwrap();
        let [t, h, wd] = g.input;
        let [kt, kh, kw] = g.kernel;
        let [to, ho, wo] = g.output;
        let mut out = Tensor::zeros(g.out_shape());
        for b in 0..g.batch {
            for co in 0..g.c_out {
                for ot in 0..to {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0;
                            for ci in 0..g.c_in {
                                for a in 0..kt {
                                    for c in 0..kh {
                                        for d in 0..kw {
                                            let ti = (ot * stride[0] + a) as isize - pad[0];
                                            let yi = (oy * stride[1] + c) as isize - pad[1];
                                            let xi = (ox * stride[2] + d) as isize - pad[2];
                                            if ti < 0 || yi < 0 || xi < 0 || ti >= t as isize || yi >= h as isize || xi >= wd as isize {
                                                continue;
                                            }
                                            let xv = x.data()[(((b * g.c_in + ci) * t + ti as usize) * h + yi as usize) * wd + xi as usize];
                                            let wv = w.data()[(((co * g.c_in + ci) * kt + a) * kh + c) * kw + d];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((b * g.c_out + co) * to + ot) * ho + oy) * wo + ox] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_path_matches_direct_loops() {
        let mut rng = Rng::new(3);
        for (stride, pad, k) in [([1, 1, 1], [1, 1, 1], [3, 3, 3]), ([2, 1, 2], [0, 1, 2], [3, 2, 3]), ([1, 2, 2], [-1, 0, 0], [1, 3, 3]), ([1, 1, 1], [0, 0, 0], [1, 1, 1])] {
            let x = rng.normal_tensor::<f64>(vec![2, 3, 5, 6, 7], 1.0);
            let w = rng.normal_tensor::<f64>(vec![4, 3, k[0], k[1], k[2]], 1.0);
            let g = ConvGeom::new(x.shape(), w.shape(), stride, pad, false).unwrap();
            let fast = conv3d_forward(&x, &w, None, &g);
            let slow = direct_conv(&x, &w, stride, pad);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "stride {stride:?} pad {pad:?}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, dx(g)>  and  == <w, dw(g)>
        let mut rng = Rng::new(5);
        let x = rng.normal_tensor::<f64>(vec![2, 2, 4, 5, 5], 1.0);
        let w = rng.normal_tensor::<f64>(vec![3, 2, 3, 3, 3], 1.0);
        let g = ConvGeom::new(x.shape(), w.shape(), [1, 2, 1], [1, 1, 0], false).unwrap();
        let y = conv3d_forward(&x, &w, None, &g);
        let gout = rng.normal_tensor::<f64>(y.shape().to_vec(), 1.0);
        let (dx, dw, _) = conv3d_backward(&x, &w, &gout, &g, true);
        let lhs: f64 = y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum();
        let rx: f64 = x.data().iter().zip(dx.unwrap().data()).map(|(a, b)| a * b).sum();
        let rw: f64 = w.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - rw).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        assert!(ConvGeom::new(&[1, 1, 2, 5, 5], &[1, 1, 3, 3, 3], [1, 1, 1], [0, 0, 0], false).is_err());
        assert!(ConvGeom::new(&[1, 2, 4, 4, 4], &[1, 3, 1, 1, 1], [1, 1, 1], [0, 0, 0], false).is_err());
    }

    #[test]
    fn transposed_temporal_doubles_length() {
        let g = TemporalTransposeGeom::new(&[1, 4, 10, 2, 2], &[4, 3, 4], 2, 1).unwrap();
        assert_eq!(g.t_out, 20);
    }
}
