//! Convolution, pooling and the TDC kernel aggregation on the tape.

use super::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::kernels::conv::{self as k, ConvGeom, TemporalTransposeGeom};
use crate::tensor::{Element, Tensor};

impl<E: Element> Tape<E> {
    /// Dense 3D convolution of `[B, C_in, T, H, W]` by `[C_out, C_in, kt, kh, kw]`.
    ///
    /// Padding is signed; a negative pad crops the input symmetrically.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: [usize; 3], pad: [isize; 3]) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, false)?;
        if let Some(b) = bias {
            if self.shape(b) != [g.c_out] {
                return Err(dim_err!("conv3d bias {:?} for {} output channels", self.shape(b), g.c_out));
            }
        }
        let out = k::conv3d_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), &g);
        let need_dx = self.requires_grad(x);
        let inputs: Vec<Var> = [x, w].into_iter().chain(bias).collect();
        self.record("conv3d", out, &inputs, move |ins, _, gout| {
            let (dx, dw, db) = k::conv3d_backward(ins[0], ins[1], gout, &g, need_dx);
            let mut grads = vec![dx, Some(dw)];
            if ins.len() == 3 {
                grads.push(Some(db));
            }
            grads
        })
    }

    /// Per-channel 3D convolution; `w` is `[C, 1, kt, kh, kw]`.
    pub fn depthwise_conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [isize; 3]) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, true)?;
        let out = k::depthwise_forward(self.value(x), self.value(w), &g);
        self.record("depthwise_conv3d", out, &[x, w], move |ins, _, gout| {
            let (dx, dw) = k::depthwise_backward(ins[0], ins[1], gout, &g);
            vec![Some(dx), Some(dw)]
        })
    }

    /// Transposed convolution along time only; `w` is `[C_in, C_out, k]`.
    /// Output length is `(T-1)*stride - 2*pad + k`.
    pub fn transposed_temporal_conv(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let g = TemporalTransposeGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [g.c_out] {
                return Err(dim_err!("transposed conv bias {:?} for {} output channels", self.shape(b), g.c_out));
            }
        }
        let out = k::temporal_transpose_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), &g);
        let inputs: Vec<Var> = [x, w].into_iter().chain(bias).collect();
        self.record("transposed_temporal_conv", out, &inputs, move |ins, _, gout| {
            let (dx, dw, db) = k::temporal_transpose_backward(ins[0], ins[1], gout, &g);
            let mut grads = vec![Some(dx), Some(dw)];
            if ins.len() == 3 {
                grads.push(Some(db));
            }
            grads
        })
    }

    /// Max pooling over `[B, C, T, H, W]` without padding; windows that would
    /// overhang the input are dropped.
    pub fn maxpool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(dim_err!("maxpool3d expects [B,C,T,H,W], got {s:?}"));
        }
        let mut o = [0usize; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 || kernel[a] > s[2 + a] {
                return Err(dim_err!("maxpool3d kernel {kernel:?} stride {stride:?} on {s:?}"));
            }
            o[a] = (s[2 + a] - kernel[a]) / stride[a] + 1;
        }
        let (t, h, w) = (s[2], s[3], s[4]);
        let vin = t * h * w;
        let vout = o[0] * o[1] * o[2];
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * s[1] * vout);
        let mut argmax = Vec::with_capacity(s[0] * s[1] * vout);
        for bc in 0..s[0] * s[1] {
            let xc = &xd[bc * vin..(bc + 1) * vin];
            if kernel == [1, 2, 2] && stride == kernel {
                for ot in 0..o[0] {
                    for oy in 0..o[1] {
                        let r0 = (ot * h + 2 * oy) * w;
                        for ox in 0..o[2] {
                            let i = r0 + 2 * ox;
                            let mut best = (i, xc[i]);
                            for j in [i + 1, i + w, i + w + 1] {
                                if xc[j] > best.1 {
                                    best = (j, xc[j]);
                                }
                            }
                            data.push(best.1);
                            argmax.push(bc * vin + best.0);
                        }
                    }
                }
                continue;
            }
            for ot in 0..o[0] {
                for oy in 0..o[1] {
                    for ox in 0..o[2] {
                        let mut best = (usize::MAX, E::ZERO);
                        for dt in 0..kernel[0] {
                            for dy in 0..kernel[1] {
                                for dx in 0..kernel[2] {
                                    let i = ((ot * stride[0] + dt) * h + oy * stride[1] + dy) * w + ox * stride[2] + dx;
                                    if best.0 == usize::MAX || xc[i] > best.1 {
                                        best = (i, xc[i]);
                                    }
                                }
                            }
                        }
                        data.push(best.1);
                        argmax.push(bc * vin + best.0);
                    }
                }
            }
        }
        let out = Tensor::new(vec![s[0], s[1], o[0], o[1], o[2]], data)?;
        self.record("maxpool3d", out, &[x], move |ins, _, g| {
            let mut d = vec![E::ZERO; ins[0].len()];
            for (&i, &v) in argmax.iter().zip(g.data()) {
                d[i] += v;
            }
            vec![Some(Tensor::new(ins[0].shape().to_vec(), d).expect("maxpool grad"))]
        })
    }

    /// Sums a `[C_out, C_in, 3, kh, kw]` kernel over its two outer temporal
    /// slices, giving `[C_out, C_in, 1, 1, 1]`.
    pub fn tdc_adjacent_sum(&mut self, w: Var) -> Result<Var> {
        let s = self.shape(w).to_vec();
        if s.len() != 5 || s[2] != 3 {
            return Err(dim_err!("temporal difference kernel must be [C_out, C_in, 3, kh, kw], got {s:?}"));
        }
        let slice = s[3] * s[4];
        let pairs = s[0] * s[1];
        let wd = self.value(w).data();
        let data: Vec<E> = (0..pairs)
            .map(|p| {
                let base = p * 3 * slice;
                let prev: E = wd[base..base + slice].iter().copied().sum();
                let next: E = wd[base + 2 * slice..base + 3 * slice].iter().copied().sum();
                prev + next
            })
            .collect();
        let out = Tensor::new(vec![s[0], s[1], 1, 1, 1], data)?;
        self.record("tdc_adjacent_sum", out, &[w], move |ins, _, g| {
            let gd = g.data();
            let d = Tensor::from_fn(ins[0].shape().to_vec(), |i| {
                let (p, tap) = (i / (3 * slice), (i / slice) % 3);
                if tap == 1 {
                    E::ZERO
                } else {
                    gd[p]
                }
            });
            vec![Some(d)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_weight_two_doubles_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 1, 2, 3, 3], |i| i as f32));
        let w = tape.constant(Tensor::full(vec![1, 1, 1, 1, 1], 2.0));
        let y = tape.conv3d(x, w, None, [1; 3], [0; 3]).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(vec![1, 1, 5, 5, 5]));
        let w = tape.constant(Tensor::ones(vec![1, 1, 3, 3, 3]));
        let y = tape.conv3d(x, w, None, [1; 3], [0; 3]).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 27.0));
    }

    #[test]
    fn depthwise_identity_and_scalar_kernels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 2, 3, 3, 3], |i| (i as f64).sin()));
        let id = tape.constant(Tensor::from_fn(vec![2, 1, 3, 3, 3], |i| if i % 27 == 13 { 1.0 } else { 0.0 }));
        let y = tape.depthwise_conv3d(x, id, [1; 3], [1; 3]).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let sc = tape.constant(Tensor::from_f64(vec![2, 1, 1, 1, 1], &[2.0, -3.0]).unwrap());
        let z = tape.depthwise_conv3d(x, sc, [1; 3], [0; 3]).unwrap();
        for (i, (&a, &b)) in tape.value(z).data().iter().zip(tape.value(x).data()).enumerate() {
            assert_eq!(a, if i < 27 { 2.0 * b } else { -3.0 * b });
        }
    }

    #[test]
    fn maxpool_halves_space_and_routes_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![1, 1, 1, 2, 4], |i| i as f64));
        let y = tape.maxpool3d(x, [1, 2, 2], [1, 2, 2]).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0., 0., 0., 0., 0., 1., 0., 1.]);
    }

    #[test]
    fn adjacent_sum_skips_centre_slice() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::from_fn(vec![1, 1, 3, 3, 3], |i| (i / 9 + 1) as f64));
        let s = tape.tdc_adjacent_sum(w).unwrap();
        assert_eq!(tape.value(s).data(), &[9.0 * 1.0 + 9.0 * 3.0]);
    }
}
