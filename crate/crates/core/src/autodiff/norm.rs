//! Normalization layers and softmax.

use super::{Tape, Var};
use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as folded into running statistics.
    pub var: Vec<f64>,
}

fn channel_layout(shape: &[usize], c: usize) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 || shape[1] != c {
        return Err(dim_err!("batchnorm: input {shape:?} does not have {c} channels on axis 1"));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], c, inner))
}

impl<E: Element> Tape<E> {
    fn affine_params(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!(
                "norm affine parameters {:?}/{:?} do not match {c} features",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(())
    }

    /// Training-mode batch norm over axis 1 of `[B, C, ..]`, normalizing by
    /// the biased batch variance.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let c = self.shape(gamma).first().copied().unwrap_or(0);
        let (b, c, inner) = channel_layout(self.shape(x), c)?;
        self.affine_params(gamma, beta, c)?;
        let n = b * inner;
        if n < 2 {
            return Err(dim_err!("batchnorm needs at least two values per channel, got {n}"));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let s = &xd[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                mean[ch] += s.iter().map(|v| v.to_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for bi in 0..b {
            for ch in 0..c {
                let s = &xd[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                sq[ch] += s.iter().map(|v| (v.to_f64() - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let inv_std: Vec<f64> = sq.iter().map(|s| 1.0 / (s / n as f64 + eps).sqrt()).collect();
        let stats = BatchStats { mean: mean.clone(), var: sq.iter().map(|s| s / (n - 1) as f64).collect() };

        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut xhat: Vec<E> = Vec::with_capacity(xd.len());
        let mut out: Vec<E> = Vec::with_capacity(xd.len());
        for (k, chunk) in xd.chunks_exact(inner).enumerate() {
            let ch = k % c;
            let (m, is) = (E::from_f64(mean[ch]), E::from_f64(inv_std[ch]));
            for &v in chunk {
                let h = (v - m) * is;
                xhat.push(h);
                out.push(gd[ch] * h + bd[ch]);
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.record("batchnorm_train", out, &[x, gamma, beta], move |ins, _, g| {
            let gdat = g.data();
            let gamma = ins[1].data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gh = vec![0.0; c];
            for (k, (gc, hc)) in gdat.chunks_exact(inner).zip(xhat.chunks_exact(inner)).enumerate() {
                let ch = k % c;
                sum_g[ch] += gc.iter().map(|v| v.to_f64()).sum::<f64>();
                sum_gh[ch] += gc.iter().zip(hc).map(|(a, b)| a.to_f64() * b.to_f64()).sum::<f64>();
            }
            let nf = n as f64;
            let mut dx = Vec::with_capacity(gdat.len());
            for (k, (gc, hc)) in gdat.chunks_exact(inner).zip(xhat.chunks_exact(inner)).enumerate() {
                let ch = k % c;
                let a = gamma[ch].to_f64() * inv_std[ch];
                let (mg, mgh) = (sum_g[ch] / nf, sum_gh[ch] / nf);
                let (a, mg, mgh) = (E::from_f64(a), E::from_f64(mg), E::from_f64(mgh));
                dx.extend(gc.iter().zip(hc).map(|(&gv, &h)| a * (gv - mg - h * mgh)));
            }
            let dx = Tensor::new(ins[0].shape().to_vec(), dx).expect("batchnorm grad");
            let dgamma = Tensor::from_fn(vec![c], |ch| E::from_f64(sum_gh[ch]));
            let dbeta = Tensor::from_fn(vec![c], |ch| E::from_f64(sum_g[ch]));
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        })?;
        Ok((v, stats))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let c = mean.len();
        if var.len() != c {
            return Err(Error::State(format!("running statistics have {c} means but {} variances", var.len())));
        }
        let (_, c, inner) = channel_layout(self.shape(x), c)?;
        self.affine_params(gamma, beta, c)?;
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let out = Tensor::from_fn(self.shape(x).to_vec(), |i| {
            let ch = (i / inner) % c;
            let h = (self.value(x).data()[i].to_f64() - mean[ch]) * scale[ch];
            E::from_f64(gd[ch].to_f64() * h + bd[ch].to_f64())
        });
        self.record("batchnorm_eval", out, &[x, gamma, beta], move |ins, _, g| {
            let gamma = ins[1].data();
            let mut dgamma = vec![E::ZERO; c];
            let mut dbeta = vec![E::ZERO; c];
            let xd = ins[0].data();
            let dx = Tensor::from_fn(ins[0].shape().to_vec(), |i| {
                let ch = (i / inner) % c;
                let gv = g.data()[i];
                dbeta[ch] += gv;
                dgamma[ch] += gv * E::from_f64((xd[i].to_f64() - mean[ch]) * scale[ch]);
                gv * gamma[ch] * E::from_f64(scale[ch])
            });
            vec![Some(dx), Some(Tensor::new(vec![c], dgamma).expect("dgamma")), Some(Tensor::new(vec![c], dbeta).expect("dbeta"))]
        })
    }

    /// Layer norm over the last axis with a per-feature affine map.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| dim_err!("layernorm of a rank-0 tensor"))?;
        self.affine_params(gamma, beta, d)?;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xd.chunks_exact(d) {
            let m = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v.to_f64() - m) * is));
        }
        let out = Tensor::from_fn(self.shape(x).to_vec(), |i| E::from_f64(gd[i % d].to_f64() * xhat[i] + bd[i % d].to_f64()));
        self.record("layernorm", out, &[x, gamma, beta], move |ins, _, g| {
            let gamma = ins[1].data();
            let gdat = g.data();
            let mut dx = vec![E::ZERO; gdat.len()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..rows {
                let (mut s1, mut s2) = (0.0, 0.0);
                for j in 0..d {
                    let i = r * d + j;
                    let gh = gdat[i].to_f64() * gamma[j].to_f64();
                    s1 += gh;
                    s2 += gh * xhat[i];
                    dgamma[j] += gdat[i].to_f64() * xhat[i];
                    dbeta[j] += gdat[i].to_f64();
                }
                for j in 0..d {
                    let i = r * d + j;
                    let gh = gdat[i].to_f64() * gamma[j].to_f64();
                    dx[i] = E::from_f64(inv_std[r] * (gh - s1 / d as f64 - xhat[i] * s2 / d as f64));
                }
            }
            vec![
                Some(Tensor::new(ins[0].shape().to_vec(), dx).expect("dx")),
                Some(Tensor::from_fn(vec![d], |j| E::from_f64(dgamma[j]))),
                Some(Tensor::from_fn(vec![d], |j| E::from_f64(dbeta[j]))),
            ]
        })
    }

    /// Softmax of `x / tau` over the last axis, stabilized by subtracting
    /// the row maximum.
    pub fn softmax_temp(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(param_err!("softmax temperature must be positive, got {tau}"));
        }
        let n = *self.shape(x).last().ok_or_else(|| dim_err!("softmax of a rank-0 tensor"))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            softmax_row(row, tau);
        }
        let inv_tau = E::from_f64(1.0 / tau);
        self.record("softmax_temp", out, &[x], move |_, y, g| {
            let mut d = g.clone();
            for (drow, yrow) in d.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
                let dot: E = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (dv, &yv) in drow.iter_mut().zip(yrow) {
                    *dv = yv * (*dv - dot) * inv_tau;
                }
            }
            vec![Some(d)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().ok_or_else(|| dim_err!("log_softmax of a rank-0 tensor"))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        self.record("log_softmax", out, &[x], move |_, y, g| {
            let mut d = g.clone();
            for (drow, yrow) in d.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
                let total: E = drow.iter().copied().sum();
                for (dv, &yv) in drow.iter_mut().zip(yrow) {
                    *dv = *dv - yv.exp() * total;
                }
            }
            vec![Some(d)]
        })
    }
}

pub(crate) fn softmax_row<E: Element>(row: &mut [E], tau: f64) {
    let inv_tau = E::from_f64(1.0 / tau);
    let m = row.iter().copied().fold(row[0], E::max);
    let mut z = E::ZERO;
    for v in row.iter_mut() {
        *v = ((*v - m) * inv_tau).exp();
        z += *v;
    }
    let inv_z = E::ONE / z;
    row.iter_mut().for_each(|v| *v *= inv_z);
}

pub(crate) fn log_sum_exp<E: Element>(row: &[E]) -> E {
    let m = row.iter().copied().fold(row[0], E::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<E>().ln()
}
