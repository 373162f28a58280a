//! Fused loss primitives operating row-wise over the last axis.

use super::norm::log_sum_exp;
use super::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Tensor};

fn last_axis(shape: &[usize]) -> Result<(usize, usize, Vec<usize>)> {
    let n = *shape.last().ok_or_else(|| dim_err!("row op on a rank-0 tensor"))?;
    let rows = shape.iter().product::<usize>() / n;
    let lead = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
    Ok((rows, n, lead))
}

impl<E: Element> Tape<E> {
    /// Z-scores each row (biased variance). Constant rows are a
    /// degenerate-signal error.
    pub fn standardize(&mut self, x: Var) -> Result<Var> {
        let (_, n, _) = last_axis(self.shape(x))?;
        if n < 2 {
            return Err(dim_err!("standardize needs rows of length ≥ 2"));
        }
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks_exact(n) {
            let m = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>() / n as f64;
            if var <= 0.0 {
                return Err(Error::Degenerate("standardize of a constant signal".into()));
            }
            let is = 1.0 / var.sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|v| E::from_f64((v.to_f64() - m) * is)));
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        self.record("standardize", out, &[x], move |_, z, g| {
            let mut d = g.clone();
            for ((drow, zrow), &is) in d.data_mut().chunks_exact_mut(n).zip(z.data().chunks_exact(n)).zip(&inv_std) {
                let sg = drow.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
                let sgz = drow.iter().zip(zrow).map(|(a, b)| a.to_f64() * b.to_f64()).sum::<f64>() / n as f64;
                for (dv, &zv) in drow.iter_mut().zip(zrow) {
                    *dv = E::from_f64(is * (dv.to_f64() - sg - zv.to_f64() * sgz));
                }
            }
            vec![Some(d)]
        })
    }

    /// `1 - r` per row, where `r` is the Pearson correlation between a row
    /// of `y_hat` and the matching row of the fixed target `y`.
    ///
    /// Output shape is the leading shape of `y_hat` (`[1]` for a vector).
    pub fn neg_pearson(&mut self, y_hat: Var, y: &Tensor<E>) -> Result<Var> {
        self.value(y_hat).expect_same_shape(y, "neg_pearson")?;
        let (rows, n, lead) = last_axis(y.shape())?;
        if n < 2 {
            return Err(dim_err!("neg_pearson needs at least 2 samples"));
        }
        // Centre and normalize the target once; r = <ŷc, yn> / |ŷc|.
        let mut yn = Vec::with_capacity(rows * n);
        for row in y.data().chunks_exact(n) {
            let m = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let norm = row.iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate("neg_pearson target has zero variance".into()));
            }
            yn.extend(row.iter().map(|v| (v.to_f64() - m) / norm));
        }
        let mut cache = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for (r, row) in self.value(y_hat).data().chunks_exact(n).enumerate() {
            let m = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let c: Vec<f64> = row.iter().map(|v| v.to_f64() - m).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate("neg_pearson prediction has zero variance".into()));
            }
            let corr = c.iter().zip(&yn[r * n..(r + 1) * n]).map(|(a, b)| a * b).sum::<f64>() / norm;
            out.push(E::from_f64(1.0 - corr));
            cache.push((c, norm, corr));
        }
        let out = Tensor::new(lead, out)?;
        self.record("neg_pearson", out, &[y_hat], move |ins, _, g| {
            // dr/dŷ = (yn - r·ĉ/|ĉ|) / |ĉ|, then centred (mean of yn and ĉ is 0).
            let mut d = Vec::with_capacity(rows * n);
            for (r, (c, norm, corr)) in cache.iter().enumerate() {
                let gr = g.data()[r].to_f64();
                for (j, &cj) in c.iter().enumerate() {
                    let dr = (yn[r * n + j] - corr * cj / norm) / norm;
                    d.push(E::from_f64(-gr * dr));
                }
            }
            vec![Some(Tensor::new(ins[0].shape().to_vec(), d).expect("pearson grad"))]
        })
    }

    /// Cross-entropy `-Σ p_k ln softmax(logits)_k` per row against a fixed
    /// target distribution.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor<E>) -> Result<Var> {
        self.value(logits).expect_same_shape(target, "soft_cross_entropy")?;
        let (rows, n, lead) = last_axis(target.shape())?;
        let mut probs = self.value(logits).clone();
        let mut out = Vec::with_capacity(rows);
        for (row, prow) in probs.data_mut().chunks_exact_mut(n).zip(target.data().chunks_exact(n)) {
            let lse = log_sum_exp(row);
            out.push(prow.iter().zip(row.iter()).map(|(&p, &z)| p * (lse - z)).sum::<E>());
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let target = target.clone();
        let out = Tensor::new(lead, out)?;
        self.record("soft_cross_entropy", out, &[logits], move |_, _, g| {
            let mut d = probs.clone();
            for (r, (drow, prow)) in d.data_mut().chunks_exact_mut(n).zip(target.data().chunks_exact(n)).enumerate() {
                let gr = g.data()[r];
                let mass: E = prow.iter().copied().sum();
                for (dv, &p) in drow.iter_mut().zip(prow) {
                    *dv = gr * (*dv * mass - p);
                }
            }
            vec![Some(d)]
        })
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against fixed targets,
    /// computed in the overflow-safe form `max(z,0) - z·t + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<E>) -> Result<Var> {
        self.value(logits).expect_same_shape(target, "bce_with_logits")?;
        let n = target.len();
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| {
                let (z, t) = (z.to_f64(), t.to_f64());
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let out = Tensor::scalar(E::from_f64(total / n as f64));
        let target = target.clone();
        let inv = E::from_f64(1.0 / n as f64);
        self.record("bce_with_logits", out, &[logits], move |ins, _, g| {
            let gs = g.data()[0] * inv;
            let d = ins[0].zip_map(&target, |z, t| gs * (super::basic::sigmoid(z) - t)).expect("bce grad");
            vec![Some(d)]
        })
    }
}

impl<E: Element> Tape<E> {
    /// Divides each row by its sum. Rows must have a positive sum.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let (_, n, _) = last_axis(self.shape(x))?;
        let mut sums = Vec::new();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let s = row.iter().map(|v| v.to_f64()).sum::<f64>();
            if !(s > 0.0) {
                return Err(Error::Degenerate("normalize_sum of a row without positive mass".into()));
            }
            row.iter_mut().for_each(|v| *v = E::from_f64(v.to_f64() / s));
            sums.push(s);
        }
        self.record("normalize_sum", out, &[x], move |_, y, g| {
            // d(x_i/s)/dx_j = (δ_ij - y_i) / s
            let mut d = g.clone();
            for ((drow, yrow), &s) in d.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)).zip(&sums) {
                let gy = drow.iter().zip(yrow).map(|(a, b)| a.to_f64() * b.to_f64()).sum::<f64>();
                drow.iter_mut().for_each(|v| *v = E::from_f64((v.to_f64() - gy) / s));
            }
            vec![Some(d)]
        })
    }
}
