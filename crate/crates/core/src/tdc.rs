//! Temporal difference convolution.
//!
//! A TDC layer is a `3 × kh × kw` convolution whose response is pulled
//! towards a local temporal difference:
//!
//! ```text
//! y(p0) = Σ_{pn ∈ R} w(pn)·x(p0 + pn)  -  θ · x(p0) · Σ_{pn ∈ R'} w(pn)
//! ```
//!
//! `R` is the full kernel support and `R'` the taps of the two outer
//! temporal slices. The second term equals a `1×1×1` convolution of the
//! input with the summed outer-slice weights, evaluated at the kernel
//! centre, which is how it is computed here.
//!
//! ```
//! use physformer::tdc::TdcLayer;
//! use physformer::Tensor;
//!
//! let layer = TdcLayer::new(Tensor::<f32>::ones(vec![1, 1, 3, 3, 3]), None, 0.5, [1; 3], [0; 3]).unwrap();
//! let y = layer.forward(&Tensor::ones(vec![1, 1, 5, 5, 5])).unwrap();
//! // 27 taps minus θ times the 18 outer-slice taps
//! assert!(y.data().iter().all(|&v| v == 18.0));
//! ```

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, param_err, Result};
use crate::tensor::{Element, Tensor};

/// Geometry and mixing coefficient of a TDC application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdcSpec {
    pub theta: f64,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl TdcSpec {
    pub fn new(theta: f64, stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(param_err!("theta must lie in [0, 1], got {theta}"));
        }
        Ok(Self { theta, stride, pad })
    }

    /// Stride 1, padding 1: output extents equal input extents.
    pub fn same(theta: f64) -> Result<Self> {
        Self::new(theta, [1; 3], [1; 3])
    }
}

/// Records a TDC on the tape. `w` is `[C_out, C_in, 3, kh, kw]` with odd
/// spatial extents; `bias` is added once after both terms.
pub fn tdc<E: Element>(tape: &mut Tape<E>, x: Var, w: Var, bias: Option<Var>, spec: TdcSpec) -> Result<Var> {
    TdcSpec::new(spec.theta, spec.stride, spec.pad)?;
    let ws = tape.shape(w).to_vec();
    if ws.len() != 5 || ws[2] != 3 || ws[3] % 2 == 0 || ws[4] % 2 == 0 {
        return Err(dim_err!("TDC kernel must be [C_out, C_in, 3, odd, odd], got {ws:?}"));
    }
    let pad = spec.pad.map(|p| p as isize);
    if spec.theta == 0.0 {
        return tape.conv3d(x, w, bias, spec.stride, pad);
    }
    let vanilla = tape.conv3d(x, w, None, spec.stride, pad)?;
    let summed = tape.tdc_adjacent_sum(w)?;
    // The kernel centre sits (k-1)/2 taps in, so the pointwise term reads
    // the input at pad - (k-1)/2.
    let centre_pad = [pad[0] - 1, pad[1] - (ws[3] as isize - 1) / 2, pad[2] - (ws[4] as isize - 1) / 2];
    let mut diff = tape.conv3d(x, summed, None, spec.stride, centre_pad)?;
    // With stride > 1 the pointwise grid can run one step past the full one.
    let want = tape.shape(vanilla).to_vec();
    for axis in 2..5 {
        diff = tape.narrow(diff, axis, 0, want[axis])?;
    }
    let diff = tape.scale(diff, spec.theta)?;
    let out = tape.sub(vanilla, diff)?;
    match bias {
        Some(b) => tape.add_bias(out, b, 1),
        None => Ok(out),
    }
}

/// A standalone TDC layer holding its own weights.
#[derive(Clone, Debug)]
pub struct TdcLayer<E: Element = f32> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub spec: TdcSpec,
}

impl<E: Element> TdcLayer<E> {
    pub fn new(weight: Tensor<E>, bias: Option<Tensor<E>>, theta: f64, stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 5 || s[2] != 3 {
            return Err(dim_err!("TDC kernel must have temporal extent 3, got {s:?}"));
        }
        Ok(Self { weight, bias, spec: TdcSpec::new(theta, stride, pad)? })
    }

    /// Applies the layer to `[B, C_in, T, H, W]` without recording gradients.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(self.weight.clone());
        let bv = self.bias.clone().map(|b| tape.constant(b));
        let y = tdc(&mut tape, xv, wv, bv, self.spec)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct evaluation of the defining sum, one output voxel at a time.
    fn literal(x: &Tensor<f64>, w: &Tensor<f64>, theta: f64, stride: [usize; 3], pad: [usize; 3]) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let out: Vec<usize> = (0..3).map(|a| (xs[2 + a] + 2 * pad[a] - ws[2 + a]) / stride[a] + 1).collect();
        let at = |b: usize, c: usize, t: isize, y: isize, z: isize| -> f64 {
            if t < 0 || y < 0 || z < 0 || t >= xs[2] as isize || y >= xs[3] as isize || z >= xs[4] as isize {
                0.0
            } else {
                x.data()[(((b * xs[1] + c) * xs[2] + t as usize) * xs[3] + y as usize) * xs[4] + z as usize]
            }
        };
        let wat = |o: usize, c: usize, t: usize, y: usize, z: usize| w.data()[(((o * ws[1] + c) * 3 + t) * ws[3] + y) * ws[4] + z];
        Tensor::from_fn(vec![xs[0], ws[0], out[0], out[1], out[2]], |i| {
            let oz = i % out[2];
            let oy = (i / out[2]) % out[1];
            let ot = (i / (out[2] * out[1])) % out[0];
            let o = (i / (out[2] * out[1] * out[0])) % ws[0];
            let b = i / (out[2] * out[1] * out[0] * ws[0]);
            let t0 = (ot * stride[0]) as isize - pad[0] as isize;
            let y0 = (oy * stride[1]) as isize - pad[1] as isize;
            let z0 = (oz * stride[2]) as isize - pad[2] as isize;
            let (cy, cz) = ((ws[3] / 2) as isize, (ws[4] / 2) as isize);
            let mut acc = 0.0;
            for c in 0..ws[1] {
                let centre = at(b, c, t0 + 1, y0 + cy, z0 + cz);
                for dt in 0..3 {
                    for dy in 0..ws[3] {
                        for dz in 0..ws[4] {
                            let wv = wat(o, c, dt, dy, dz);
                            acc += wv * at(b, c, t0 + dt as isize, y0 + dy as isize, z0 + dz as isize);
                            if dt != 1 {
                                acc -= theta * wv * centre;
                            }
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_literal_sum_at_default_theta() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let x = rng.normal_tensor::<f64>(vec![2, 3, 6, 5, 5], 1.0);
            let w = rng.normal_tensor::<f64>(vec![4, 3, 3, 3, 3], 0.3);
            let (stride, pad) = if seed % 2 == 0 { ([1; 3], [1; 3]) } else { ([2, 1, 2], [0, 1, 1]) };
            let layer = TdcLayer::new(w.clone(), None, 0.7, stride, pad).unwrap();
            let got = layer.forward(&x).unwrap();
            let want = literal(&x, &w, 0.7, stride, pad);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn theta_zero_is_plain_convolution() {
        let mut rng = Rng::new(5);
        let x = rng.normal_tensor::<f32>(vec![1, 2, 4, 4, 4], 1.0);
        let w = rng.normal_tensor::<f32>(vec![3, 2, 3, 3, 3], 0.3);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let plain = tape.conv3d(xv, wv, None, [1; 3], [1; 3]).unwrap();
        let got = TdcLayer::new(w, None, 0.0, [1; 3], [1; 3]).unwrap().forward(&x).unwrap();
        assert_eq!(&got, tape.value(plain));
    }

    #[test]
    fn rejects_theta_out_of_range() {
        assert!(TdcLayer::new(Tensor::<f32>::ones(vec![1, 1, 3, 3, 3]), None, 1.5, [1; 3], [1; 3]).is_err());
        assert!(TdcSpec::new(-0.1, [1; 3], [1; 3]).is_err());
    }

    #[test]
    fn antisymmetric_outer_slices_cancel_difference_term() {
        let mut rng = Rng::new(11);
        let mut w = rng.normal_tensor::<f64>(vec![2, 2, 3, 3, 3], 0.5);
        for p in 0..4 {
            for k in 0..9 {
                let v = w.data()[p * 27 + k];
                w.data_mut()[p * 27 + 18 + k] = -v;
            }
        }
        let x = rng.normal_tensor::<f64>(vec![1, 2, 5, 4, 4], 1.0);
        let a = TdcLayer::new(w.clone(), None, 0.9, [1; 3], [1; 3]).unwrap().forward(&x).unwrap();
        let b = TdcLayer::new(w, None, 0.0, [1; 3], [1; 3]).unwrap().forward(&x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}
