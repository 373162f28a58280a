//! Central finite-difference verification of tape gradients.
//!
//! [`gradcheck`] compares an `f64` tape against differences of the same
//! function. [`suite`] lists one case per differentiable primitive,
//! attention variant and loss; [`run_case`] checks each case twice: the
//! `f64` tape against `f64` differences, and an `f32` tape (on the same,
//! `f32`-representable inputs) against the same `f64` differences.

use crate::attention::{self, AttentionConfig, Projection};
use crate::autodiff::{Tape, UpsampleMode, Var};
use crate::error::Result;
use crate::loss::{self, LabelDistribution, LossWeights, Targets};
use crate::rng::Rng;
use crate::tdc::{tdc, TdcSpec};
use crate::tensor::{Element, Tensor};

/// Tolerance on [`GradReport::worst`] for `f64` tapes.
pub const TOL_F64: f64 = 1e-6;
/// Tolerance on [`GradReport::worst`] for `f32` tapes.
pub const TOL_F32: f64 = 1e-4;
/// Step of the central differences.
pub const EPSILON: f64 = 1e-5;

/// Finite-difference comparison for every input of one operation.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Per input: `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)`.
    pub max_rel_err: Vec<f64>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares analytic gradients of `f(inputs)` with central differences.
///
/// `f` must map its inputs to a scalar. Each input coordinate is perturbed
/// by `±epsilon` and `f` is re-evaluated on a fresh tape.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let numeric = numeric_gradients(&f, inputs, epsilon)?;
    let analytic = analytic_gradients(&f, inputs)?;
    Ok(compare(&analytic, &numeric))
}

/// Central differences of the scalar `f` with respect to every input
/// coordinate, each evaluated on a fresh tape.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut probe = inputs.to_vec();
    let mut all = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, nj) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + epsilon;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - epsilon;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            *nj = (up - down) / (2.0 * epsilon);
        }
        all.push(numeric);
    }
    Ok(all)
}

/// Reverse-mode gradients of the scalar `f` at `inputs`, widened to `f64`.
pub fn analytic_gradients<E, F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.cast())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| tape.grad(*v).map(|g| g.to_f64_vec()).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect())
}

fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradReport {
    let max_abs = |v: &[f64]| v.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
    let max_rel_err = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = a.iter().zip(n).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
            diff / max_abs(a).max(max_abs(n)).max(1e-12)
        })
        .collect();
    GradReport { max_rel_err }
}

type CaseFn<E> = Box<dyn Fn(&mut Tape<E>, &[Var]) -> Result<Var> + Send + Sync>;

/// One scalar-valued function checked in both precisions.
pub struct GradCase {
    pub name: &'static str,
    /// `f32`-representable values.
    pub inputs: Vec<Tensor<f64>>,
    pub f64: CaseFn<f64>,
    pub f32: CaseFn<f32>,
}

/// Outcome of [`run_case`].
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub err_f64: f64,
    pub err_f32: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.err_f64 <= TOL_F64 && self.err_f32 <= TOL_F32
    }
}

pub fn run_case(case: &GradCase) -> Result<CaseResult> {
    let numeric = numeric_gradients(&case.f64, &case.inputs, EPSILON)?;
    let a64 = analytic_gradients(&case.f64, &case.inputs)?;
    let a32 = analytic_gradients(&case.f32, &case.inputs)?;
    Ok(CaseResult { name: case.name, err_f64: compare(&a64, &numeric).worst(), err_f32: compare(&a32, &numeric).worst() })
}

/// Builds a case whose body is compiled once per precision.
/// Listed captures are cloned into the `f64` closure.
macro_rules! case {
    ($name:expr, $inputs:expr, |$t:ident, $v:ident| $body:expr) => {
        case!($name, $inputs, [], |$t, $v| $body)
    };
    ($name:expr, $inputs:expr, [$($c:ident),*], |$t:ident, $v:ident| $body:expr) => {
        GradCase {
            name: $name,
            inputs: $inputs,
            f64: {
                $(let $c = $c.clone();)*
                Box::new(move |$t: &mut Tape<f64>, $v: &[Var]| $body)
            },
            f32: Box::new(move |$t: &mut Tape<f32>, $v: &[Var]| $body),
        }
    };
}

/// Reduces any output to a scalar through fixed pseudo-random weights, so
/// that no gradient vanishes by symmetry.
pub fn project<E: Element>(tape: &mut Tape<E>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Rng::new(0x9e37).uniform_tensor::<f64>(shape, -1.0, 1.0).map(f32_round);
    let w = tape.constant(w.cast());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

struct Gen(Rng);

impl Gen {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        self.0.uniform_tensor::<f64>(shape.to_vec(), lo, hi).map(f32_round)
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.0.normal_tensor::<f64>(shape.to_vec(), 1.0).map(f32_round)
    }

    /// Values at least `gap` away from zero (kinks).
    fn away_from_zero(&mut self, shape: &[usize], gap: f64) -> Tensor<f64> {
        let mut t = self.uniform(shape, gap, 1.0);
        for v in t.data_mut() {
            if self.0.bernoulli(0.5) {
                *v = -*v;
            }
        }
        t
    }

    /// Distinct values spaced `0.1` apart in random order (no max ties).
    fn distinct(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| f32_round(0.1 * i as f64 - 0.05 * n as f64)).collect();
        self.0.shuffle(&mut v);
        Tensor::new(shape.to_vec(), v).expect("shape")
    }
}

const ATT_DIM: usize = 4;
const ATT_HEADS: usize = 2;
const ATT_L: usize = 6;
const LOSS_FPS: f64 = 8.0;
const LOSS_T: usize = 16;

fn att_cfg(lambda: f64) -> AttentionConfig {
    AttentionConfig::new(ATT_DIM, ATT_HEADS, 2.0, 0.7, lambda).expect("valid attention config")
}

/// Every differentiable primitive, attention variant and loss.
pub fn suite() -> Vec<GradCase> {
    let mut g = Gen(Rng::new(0x6ad));
    let mut cases = Vec::new();

    // Element-wise and reductions.
    cases.push(case!("add", vec![g.normal(&[2, 3]), g.normal(&[2, 3])], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y)
    }));
    cases.push(case!("sub", vec![g.normal(&[2, 3]), g.normal(&[2, 3])], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y)
    }));
    cases.push(case!("mul", vec![g.normal(&[2, 3]), g.normal(&[2, 3])], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y)
    }));
    cases.push(case!("scale", vec![g.normal(&[5])], |t, v| {
        let y = t.scale(v[0], -1.75)?;
        project(t, y)
    }));
    cases.push(case!("add_scalar", vec![g.normal(&[5])], |t, v| {
        let y = t.add_scalar(v[0], 0.5)?;
        let y = t.mul(y, y)?;
        project(t, y)
    }));
    cases.push(case!("relu", vec![g.away_from_zero(&[8], 0.05)], |t, v| {
        let y = t.relu(v[0])?;
        project(t, y)
    }));
    cases.push(case!("elu", vec![g.away_from_zero(&[8], 0.05)], |t, v| {
        let y = t.elu(v[0])?;
        project(t, y)
    }));
    cases.push(case!("sigmoid", vec![g.normal(&[8])], |t, v| {
        let y = t.sigmoid(v[0])?;
        project(t, y)
    }));
    cases.push(case!("sum", vec![g.normal(&[2, 3])], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    }));
    cases.push(case!("mean", vec![g.normal(&[2, 3])], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    }));
    cases.push(case!("mean_of", vec![g.normal(&[1]), g.normal(&[1]), g.normal(&[1])], |t, v| {
        let a = t.mul(v[0], v[1])?;
        t.mean_of(&[a, v[1], v[2]])
    }));
    cases.push(case!("add_bias", vec![g.normal(&[2, 3, 4]), g.normal(&[3])], |t, v| {
        let y = t.add_bias(v[0], v[1], 1)?;
        project(t, y)
    }));
    cases.push(case!("matmul", vec![g.normal(&[2, 3, 4]), g.normal(&[4, 5])], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y)
    }));
    cases.push(case!("matmul_batched", vec![g.normal(&[2, 3, 4]), g.normal(&[2, 4, 2])], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y)
    }));

    // Convolutions and pooling.
    cases.push(case!(
        "conv3d",
        vec![g.normal(&[1, 2, 4, 5, 5]), g.normal(&[3, 2, 3, 3, 3]), g.normal(&[3])],
        |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), [1, 2, 2], [1, 1, 1])?;
            project(t, y)
        }
    ));
    cases.push(case!("depthwise_conv3d", vec![g.normal(&[1, 3, 4, 4, 4]), g.normal(&[3, 1, 3, 3, 3])], |t, v| {
        let y = t.depthwise_conv3d(v[0], v[1], [1, 1, 1], [1, 1, 1])?;
        project(t, y)
    }));
    cases.push(case!(
        "transposed_temporal_conv",
        vec![g.normal(&[1, 2, 3, 2, 2]), g.normal(&[2, 3, 4]), g.normal(&[3])],
        |t, v| {
            let y = t.transposed_temporal_conv(v[0], v[1], Some(v[2]), 2, 1)?;
            project(t, y)
        }
    ));
    cases.push(case!("maxpool3d", vec![g.distinct(&[1, 2, 2, 4, 4])], |t, v| {
        let y = t.maxpool3d(v[0], [1, 2, 2], [1, 2, 2])?;
        project(t, y)
    }));
    cases.push(case!("tdc_adjacent_sum", vec![g.normal(&[2, 2, 3, 3, 3])], |t, v| {
        let y = t.tdc_adjacent_sum(v[0])?;
        project(t, y)
    }));
    cases.push(case!(
        "tdc",
        vec![g.normal(&[1, 2, 4, 4, 4]), g.normal(&[3, 2, 3, 3, 3]), g.normal(&[3])],
        |t, v| {
            let y = tdc(t, v[0], v[1], Some(v[2]), TdcSpec::same(0.7)?)?;
            project(t, y)
        }
    ));

    // Normalization and softmax.
    cases.push(case!(
        "batchnorm_train",
        vec![g.normal(&[2, 3, 2, 2, 2]), g.uniform(&[3], 0.5, 1.5), g.normal(&[3])],
        |t, v| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y)
        }
    ));
    cases.push(case!(
        "batchnorm_eval",
        vec![g.normal(&[2, 3, 2, 2, 2]), g.uniform(&[3], 0.5, 1.5), g.normal(&[3])],
        |t, v| {
            let y = t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0], 1e-5)?;
            project(t, y)
        }
    ));
    cases.push(case!("layernorm", vec![g.normal(&[3, 5]), g.uniform(&[5], 0.5, 1.5), g.normal(&[5])], |t, v| {
        let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
        project(t, y)
    }));
    cases.push(case!("softmax_temp", vec![g.normal(&[3, 5])], |t, v| {
        let y = t.softmax_temp(v[0], 2.0)?;
        project(t, y)
    }));
    cases.push(case!("log_softmax", vec![g.normal(&[3, 5])], |t, v| {
        let y = t.log_softmax(v[0])?;
        project(t, y)
    }));
    cases.push(case!("standardize", vec![g.normal(&[2, 12])], |t, v| {
        let y = t.standardize(v[0])?;
        project(t, y)
    }));
    cases.push(case!("normalize_sum", vec![g.uniform(&[2, 6], 0.2, 1.0)], |t, v| {
        let y = t.normalize_sum(v[0])?;
        project(t, y)
    }));

    // Shape manipulation.
    cases.push(case!("reshape", vec![g.normal(&[2, 6])], |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        project(t, y)
    }));
    cases.push(case!("permute", vec![g.normal(&[2, 3, 4])], |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        project(t, y)
    }));
    cases.push(case!("transpose", vec![g.normal(&[2, 3, 4])], |t, v| {
        let y = t.transpose(v[0], 1, 2)?;
        project(t, y)
    }));
    cases.push(case!("concat", vec![g.normal(&[2, 3, 2]), g.normal(&[2, 1, 2])], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        project(t, y)
    }));
    cases.push(case!("narrow", vec![g.normal(&[2, 5, 2])], |t, v| {
        let y = t.narrow(v[0], 1, 1, 3)?;
        project(t, y)
    }));
    cases.push(case!("select", vec![g.normal(&[3, 4])], |t, v| {
        let y = t.select(v[0], 1)?;
        project(t, y)
    }));
    cases.push(case!("spatial_mean", vec![g.normal(&[1, 2, 3, 2, 3])], |t, v| {
        let y = t.spatial_mean(v[0])?;
        project(t, y)
    }));
    cases.push(case!("temporal_upsample_nearest", vec![g.normal(&[1, 2, 3, 2, 2])], |t, v| {
        let y = t.temporal_upsample(v[0], 2, UpsampleMode::Nearest)?;
        project(t, y)
    }));
    cases.push(case!("temporal_upsample_linear", vec![g.normal(&[1, 2, 3, 2, 2])], |t, v| {
        let y = t.temporal_upsample(v[0], 2, UpsampleMode::Linear)?;
        project(t, y)
    }));
    cases.push(case!("rel_skew", vec![g.normal(&[2, 4, 7])], |t, v| {
        let y = t.rel_skew(v[0])?;
        project(t, y)
    }));
    cases.push(case!("block_mean", vec![g.normal(&[2, 6, 6])], |t, v| {
        let y = t.block_mean(v[0], 2)?;
        project(t, y)
    }));

    // Attention.
    let qkv = |g: &mut Gen| (0..3).map(|_| g.normal(&[1, ATT_L, ATT_DIM])).collect::<Vec<_>>();
    let proj = |g: &mut Gen| vec![g.normal(&[ATT_DIM, ATT_DIM]), g.normal(&[ATT_DIM])];
    let mut inputs = qkv(&mut g);
    inputs.extend(proj(&mut g));
    cases.push(case!("td_mhsa", inputs, |t, v| {
        let u = Projection { weight: v[3], bias: Some(v[4]) };
        let a = attention::td_mhsa(t, v[0], v[1], v[2], &u, &att_cfg(0.5))?;
        project(t, a.out)
    }));
    let mut inputs = qkv(&mut g);
    inputs.extend([g.normal(&[1, ATT_L / 2, ATT_DIM]), g.normal(&[1, ATT_L / 2, ATT_DIM])]);
    inputs.extend(proj(&mut g));
    cases.push(case!("td_mhcsa", inputs, |t, v| {
        let u = Projection { weight: v[5], bias: Some(v[6]) };
        let a = attention::td_mhcsa(t, v[0], v[1], v[2], v[3], v[4], &u, &att_cfg(0.5))?;
        project(t, a.out)
    }));
    let mut inputs = qkv(&mut g);
    inputs.push(g.normal(&[2 * ATT_L + 1, ATT_DIM / ATT_HEADS]));
    inputs.extend(proj(&mut g));
    cases.push(case!("td_mhpsa", inputs, |t, v| {
        let u = Projection { weight: v[4], bias: Some(v[5]) };
        let a = attention::td_mhpsa(t, v[0], v[1], v[2], v[3], &u, &att_cfg(0.5))?;
        let s = a.periodic.expect("periodic logits");
        let s = attention::pool_periodic(t, s, 2)?;
        let (o, s) = (project(t, a.out)?, project(t, s)?);
        t.add(o, s)
    }));

    // Losses.
    let bvp = synthetic_bvp(2, LOSS_T, LOSS_FPS, &[72.0, 95.0]);
    {
        let bvp = bvp.clone();
        cases.push(case!("neg_pearson", vec![g.normal(&[2, LOSS_T])], [bvp], |t, v| {
            let y = t.neg_pearson(v[0], &bvp.cast())?;
            project(t, y)
        }));
    }
    {
        let target = g.uniform(&[2, 5], 0.0, 1.0);
        cases.push(case!("soft_cross_entropy", vec![g.normal(&[2, 5])], [target], |t, v| {
            let l = t.soft_cross_entropy(v[0], &target.cast())?;
            project(t, l)
        }));
    }
    {
        let target = Tensor::new(vec![2, 4], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).expect("shape");
        cases.push(case!("bce_with_logits", vec![g.normal(&[2, 4])], [target], |t, v| {
            let l = t.bce_with_logits(v[0], &target.cast())?;
            project(t, l)
        }));
    }
    cases.push(case!("psd_distribution", vec![g.normal(&[2, LOSS_T])], |t, v| {
        let p = loss::psd_distribution(t, v[0], LOSS_FPS)?;
        project(t, p)
    }));
    cases.push(case!("freq_ce", vec![g.uniform(&[2, loss::NUM_CLASSES], 0.0, 1.0)], |t, v| {
        let l = loss::freq_ce(t, v[0], &[30, 53])?;
        project(t, l)
    }));
    {
        let dists: Vec<LabelDistribution> =
            [72.4, 95.0].iter().map(|&h| loss::label_distribution(h, 1.0).expect("in range")).collect();
        cases.push(case!("ld_loss", vec![g.uniform(&[2, loss::NUM_CLASSES], 0.0, 1.0)], [dists], |t, v| {
            let l = loss::ld_loss(t, &dists, v[0])?;
            project(t, l)
        }));
    }
    {
        let pm = Tensor::new(vec![1, 4, 4], (0..16).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).expect("shape");
        cases.push(case!("atten_loss", vec![g.normal(&[1, 2, 4, 4]), g.normal(&[1, 2, 4, 4])], [pm], |t, v| {
            let l = loss::atten_loss(t, &[v[0], v[1]], &pm.cast())?;
            project(t, l)
        }));
    }
    {
        let hr = [72.0, 95.0];
        cases.push(case!("overall_loss", vec![g.normal(&[2, LOSS_T]), g.normal(&[2, 2, 4, 4])], [bvp], |t, v| {
            let bvp = bvp.cast();
            let targets = Targets { bvp: &bvp, hr: &hr, fps: LOSS_FPS };
            Ok(loss::overall_loss(t, v[0], targets, &[v[1]], &LossWeights::default(), 3, 25)?.total)
        }));
    }
    cases
}

/// Sinusoidal BVP rows at the given rates.
fn synthetic_bvp(rows: usize, frames: usize, fps: f64, hr: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(vec![rows, frames], |i| {
        let (r, k) = (i / frames, i % frames);
        f32_round((2.0 * std::f64::consts::PI * hr[r] / 60.0 * k as f64 / fps).sin())
    })
}
