//! Element-wise arithmetic, activations, reductions and matrix products.

use super::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Element, MatView, Tensor};

impl<E: Element> Tape<E> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record("add", out, &[a, b], |_, _, g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.record("sub", out, &[a, b], |_, _, g| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record("mul", out, &[a, b], |ins, _, g| {
            vec![
                Some(g.zip_map(ins[1], |g, y| g * y).expect("shape")),
                Some(g.zip_map(ins[0], |g, x| g * x).expect("shape")),
            ]
        })
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = E::from_f64(c);
        let out = self.value(a).map(|x| x * c);
        self.record("scale", out, &[a], move |_, _, g| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = E::from_f64(c);
        let out = self.value(a).map(|x| x + c);
        self.record("add_scalar", out, &[a], |_, _, g| vec![Some(g.clone())])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(E::ZERO));
        self.record("relu", out, &[a], |ins, _, g| {
            vec![Some(g.zip_map(ins[0], |g, x| if x > E::ZERO { g } else { E::ZERO }).expect("shape"))]
        })
    }

    /// ELU with `alpha = 1`.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > E::ZERO { x } else { x.exp() - E::ONE });
        self.record("elu", out, &[a], |ins, out, g| {
            let d = ins[0].zip_map(out, |x, y| if x > E::ZERO { E::ONE } else { y + E::ONE }).expect("shape");
            vec![Some(g.zip_map(&d, |g, d| g * d).expect("shape"))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.record("sigmoid", out, &[a], |_, out, g| {
            vec![Some(g.zip_map(out, |g, s| g * s * (E::ONE - s)).expect("shape"))]
        })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.record("sum", out, &[a], |ins, _, g| vec![Some(Tensor::full(ins[0].shape().to_vec(), g.data()[0]))])
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let inv = E::from_f64(1.0 / n as f64);
        let out = Tensor::scalar(self.value(a).sum() * inv);
        self.record("mean", out, &[a], move |ins, _, g| {
            vec![Some(Tensor::full(ins[0].shape().to_vec(), g.data()[0] * inv))]
        })
    }

    /// Mean of several equally shaped values.
    pub fn mean_of(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or_else(|| dim_err!("mean_of an empty list"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        self.scale(acc, 1.0 / vars.len() as f64)
    }

    /// Adds `bias` (length `shape[axis]`) broadcast along every other axis.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.shape(bias) != [xs[axis]] {
            return Err(dim_err!("add_bias: bias {:?} does not match axis {axis} of {xs:?}", self.shape(bias)));
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let c = xs[axis];
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bd[(i / inner) % c];
        }
        self.record("add_bias", out, &[x, bias], move |_, _, g| {
            let mut db = vec![E::ZERO; c];
            for (i, &v) in g.data().iter().enumerate() {
                db[(i / inner) % c] += v;
            }
            vec![Some(g.clone()), Some(Tensor::new(vec![c], db).expect("bias grad"))]
        })
    }

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// broadcasting over the leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let out = plan.forward(self.value(a), self.value(b));
        self.record("matmul", out, &[a, b], move |ins, _, g| {
            let (da, db) = plan.backward(ins[0], ins[1], g);
            vec![Some(da), Some(db)]
        })
    }
}

#[inline]
pub(crate) fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

/// Index bookkeeping for broadcast batched matmul.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
    out_shape: Vec<usize>,
    /// (a batch index, b batch index) per output batch index.
    pairs: Vec<(usize, usize)>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(dim_err!("matmul needs rank >= 2, got {a:?} and {b:?}"));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: {a:?} × {b:?}"));
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for i in 0..rank {
            if pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1 {
                return Err(dim_err!("matmul batch extents not broadcastable: {a:?} × {b:?}"));
            }
            batch.push(pa[i].max(pb[i]));
        }
        let total: usize = batch.iter().product();
        let mut pairs = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let (mut ia, mut ib) = (0, 0);
            for d in 0..rank {
                ia = ia * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
                ib = ib * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
            }
            pairs.push((ia, ib));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        Ok(Self { m, k, n, a_shape: a.to_vec(), b_shape: b.to_vec(), out_shape, pairs })
    }

    pub fn forward<E: Element>(&self, a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![E::ZERO; self.pairs.len() * m * n];
        for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm(
                E::ONE,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                MatView::row_major(m, k),
                &b.data()[ib * k * n..(ib + 1) * k * n],
                MatView::row_major(k, n),
                E::ZERO,
                &mut out[o * m * n..(o + 1) * m * n],
                MatView::row_major(m, n),
            );
        }
        Tensor::new(self.out_shape.clone(), out).expect("matmul output")
    }

    pub fn backward<E: Element>(&self, a: &Tensor<E>, b: &Tensor<E>, g: &Tensor<E>) -> (Tensor<E>, Tensor<E>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut da = vec![E::ZERO; a.len()];
        let mut db = vec![E::ZERO; b.len()];
        for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
            let go = &g.data()[o * m * n..(o + 1) * m * n];
            // da += g · bᵀ
            gemm(
                E::ONE,
                go,
                MatView::row_major(m, n),
                &b.data()[ib * k * n..(ib + 1) * k * n],
                MatView::row_major(k, n).t(),
                E::ONE,
                &mut da[ia * m * k..(ia + 1) * m * k],
                MatView::row_major(m, k),
            );
            // db += aᵀ · g
            gemm(
                E::ONE,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                MatView::row_major(m, k).t(),
                go,
                MatView::row_major(m, n),
                E::ONE,
                &mut db[ib * k * n..(ib + 1) * k * n],
                MatView::row_major(k, n),
            );
        }
        (
            Tensor::new(self.a_shape.clone(), da).expect("da"),
            Tensor::new(self.b_shape.clone(), db).expect("db"),
        )
    }
}
