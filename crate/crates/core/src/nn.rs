//! Named parameters, forward sessions and the small layer helpers shared by
//! the attention blocks and models.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tdc::{tdc, TdcSpec};
use crate::tensor::{Element, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Trainable parameters and non-trainable buffers, keyed by dotted names.
///
/// Batch-norm running statistics live under `<prefix>.running_mean` and
/// `<prefix>.running_var` and only exist once a training step has recorded
/// them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<E: Element = f32> {
    params: BTreeMap<String, Tensor<E>>,
    buffers: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.params.get(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.params.get_mut(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<E>> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor<E>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.buffers.iter()
    }

    /// Folds one batch's statistics into the running estimates, starting
    /// from mean 0 and variance 1.
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BatchStats, momentum: f64) {
        let c = stats.mean.len();
        for (suffix, batch, init) in [("running_mean", &stats.mean, 0.0), ("running_var", &stats.var, 1.0)] {
            let key = format!("{prefix}.{suffix}");
            let buf = self.buffers.entry(key).or_insert_with(|| Tensor::full(vec![c], E::from_f64(init)));
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = E::from_f64((1.0 - momentum) * r.to_f64() + momentum * b);
            }
        }
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Registers parameters with the conventional initializations.
pub struct Init<'a, E: Element> {
    pub store: &'a mut ParamStore<E>,
    pub rng: &'a mut Rng,
}

impl<E: Element> Init<'_, E> {
    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = self.rng.uniform_tensor(shape, -bound, bound);
        self.store.insert(name, t)
    }

    /// `[C_out, C_in/groups, kt, kh, kw]` kernel plus optional bias.
    pub fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, kernel: [usize; 3], bias: bool) -> Result<()> {
        let fan = c_in * kernel.iter().product::<usize>();
        self.fan_in(&format!("{prefix}.weight"), vec![c_out, c_in, kernel[0], kernel[1], kernel[2]], fan)?;
        if bias {
            self.fan_in(&format!("{prefix}.bias"), vec![c_out], fan)?;
        }
        Ok(())
    }

    /// `[D_in, D_out]` matrix applied as `x·W + b`.
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Result<()> {
        self.fan_in(&format!("{prefix}.weight"), vec![d_in, d_out], d_in)?;
        if bias {
            self.fan_in(&format!("{prefix}.bias"), vec![d_out], d_in)?;
        }
        Ok(())
    }

    /// Scale 1, shift 0; used for both batch and layer norm.
    pub fn norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.gamma"), Tensor::ones(vec![c]))?;
        self.store.insert(format!("{prefix}.beta"), Tensor::zeros(vec![c]))
    }

    /// Zero-mean normal with standard deviation `std`.
    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> Result<()> {
        let t = self.rng.normal_tensor(shape, std);
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        self.store.insert(name, Tensor::zeros(shape))
    }
}

/// Whether batch norm uses batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass over a [`ParamStore`].
///
/// Parameters become tape leaves on first use when gradients are tracked,
/// and constants otherwise. Training-mode batch statistics are collected
/// here and applied to the store by [`Session::finish`] so the store stays
/// immutable during the pass.
pub struct Session<'s, E: Element = f32> {
    pub tape: Tape<E>,
    store: &'s ParamStore<E>,
    mode: Mode,
    track_grads: bool,
    vars: HashMap<String, Var>,
    order: Vec<String>,
    bn_stats: Vec<(String, BatchStats)>,
}

impl<'s, E: Element> Session<'s, E> {
    pub fn new(store: &'s ParamStore<E>, mode: Mode, track_grads: bool) -> Self {
        Self { tape: Tape::new(), store, mode, track_grads, vars: HashMap::new(), order: Vec::new(), bn_stats: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<E> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.track_grads { self.tape.leaf(t) } else { self.tape.constant(t) };
        self.vars.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Parameters touched so far, in first-use order.
    pub fn used_params(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.order.iter().map(move |n| (n.as_str(), self.vars[n]))
    }

    /// Gradients of every used parameter after `tape.backward`.
    pub fn grads(&self) -> BTreeMap<String, Tensor<E>> {
        self.used_params()
            .filter_map(|(n, v)| self.tape.grad(v).map(|g| (n.to_string(), g.clone())))
            .collect()
    }

    pub fn batch_stats(&self) -> &[(String, BatchStats)] {
        &self.bn_stats
    }

    /// Consumes the session, returning the tape and collected batch stats.
    pub fn finish(self) -> (Tape<E>, Vec<(String, BatchStats)>) {
        (self.tape, self.bn_stats)
    }

    /// Batch norm over axis 1 with parameters `<prefix>.gamma/.beta`.
    pub fn batchnorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
                self.bn_stats.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let (Some(m), Some(v)) = (
                    self.store.buffer(&format!("{prefix}.running_mean")),
                    self.store.buffer(&format!("{prefix}.running_var")),
                ) else {
                    return Err(Error::State(format!("batch norm `{prefix}` has no running statistics yet")));
                };
                let (m, v) = (m.to_f64_vec(), v.to_f64_vec());
                self.tape.batchnorm_eval(x, gamma, beta, &m, &v, BN_EPS)
            }
        }
    }

    pub fn layernorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        self.tape.layernorm(x, gamma, beta, LN_EPS)
    }

    /// `x·W + b` over the last axis.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let y = self.tape.matmul(x, w)?;
        let bias = format!("{prefix}.bias");
        if self.has_param(&bias) {
            let b = self.param(&bias)?;
            let axis = self.tape.shape(y).len() - 1;
            self.tape.add_bias(y, b, axis)
        } else {
            Ok(y)
        }
    }

    /// Dense convolution with `<prefix>.weight` and, if registered, `<prefix>.bias`.
    pub fn conv(&mut self, x: Var, prefix: &str, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias = format!("{prefix}.bias");
        let b = if self.has_param(&bias) { Some(self.param(&bias)?) } else { None };
        self.tape.conv3d(x, w, b, stride, pad.map(|p| p as isize))
    }

    /// Temporal difference convolution with `<prefix>.weight`.
    pub fn tdc(&mut self, x: Var, prefix: &str, spec: TdcSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias = format!("{prefix}.bias");
        let b = if self.has_param(&bias) { Some(self.param(&bias)?) } else { None };
        tdc(&mut self.tape, x, w, b, spec)
    }
}

/// `[B, D, T, H, W]` feature map to `[B, L, D]` tokens, `L = T·H·W` in
/// row-major `(t, y, x)` order.
pub fn map_to_tokens<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(dim_err!("expected a [B,D,T,H,W] map, got {s:?}"));
    }
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3] * s[4]])?;
    tape.transpose(flat, 1, 2)
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map<E: Element>(tape: &mut Tape<E>, x: Var, thw: [usize; 3]) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != thw.iter().product::<usize>() {
        return Err(dim_err!("tokens {s:?} do not tile a {thw:?} grid"));
    }
    let t = tape.transpose(x, 1, 2)?;
    tape.reshape(t, &[s[0], s[2], thw[0], thw[1], thw[2]])
}
