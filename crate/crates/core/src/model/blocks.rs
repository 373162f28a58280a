//! Building blocks: stem, tube tokenizer, ST-FF, the three transformer
//! blocks, lateral connection and predictor head.
//!
//! Each block has an `init_*` registering its parameters under a prefix and
//! a forward function reading them back from a [`Session`].

use crate::attention::{self, project_qk, AttentionConfig, AttentionOutput, Projection};
use crate::autodiff::{UpsampleMode, Var};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Init, Session};
use crate::tdc::TdcSpec;
use crate::tensor::Element;

pub fn init_stem<E: Element>(init: &mut Init<'_, E>, channels: [usize; 3]) -> Result<()> {
    let kernels = [[1, 5, 5], [3, 3, 3], [3, 3, 3]];
    let mut c_in = 3;
    for (i, (&c, k)) in channels.iter().zip(kernels).enumerate() {
        init.conv(&format!("stem.{i}.conv"), c, c_in, k, false)?;
        init.norm(&format!("stem.{i}.bn"), c)?;
        c_in = c;
    }
    Ok(())
}

/// Three Conv-BN-ReLU-MaxPool(1×2×2) blocks: `[B,3,T,H,W] → [B,D,T,H/8,W/8]`.
pub fn stem<E: Element>(sess: &mut Session<'_, E>, x: Var) -> Result<Var> {
    let s = sess.tape.shape(x).to_vec();
    if s.len() != 5 || s[1] != 3 {
        return Err(dim_err!("stem expects [B,3,T,H,W], got {s:?}"));
    }
    if s[3] % 8 != 0 || s[4] % 8 != 0 {
        return Err(config_err!("stem needs H and W divisible by 8, got {}×{}", s[3], s[4]));
    }
    let pads = [[0, 2, 2], [1, 1, 1], [1, 1, 1]];
    let mut h = x;
    for (i, pad) in pads.into_iter().enumerate() {
        h = sess.conv(h, &format!("stem.{i}.conv"), [1; 3], pad)?;
        h = sess.batchnorm(h, &format!("stem.{i}.bn"))?;
        h = sess.tape.relu(h)?;
        h = sess.tape.maxpool3d(h, [1, 2, 2], [1, 2, 2])?;
    }
    Ok(h)
}

pub fn init_tokenizer<E: Element>(init: &mut Init<'_, E>, prefix: &str, c_in: usize, c_out: usize, tube: [usize; 3]) -> Result<()> {
    init.conv(prefix, c_out, c_in, tube, true)
}

/// Non-overlapping tube embedding: a convolution with kernel = stride = tube.
pub fn tube_tokenize<E: Element>(sess: &mut Session<'_, E>, x: Var, prefix: &str, tube: [usize; 3]) -> Result<Var> {
    let s = sess.tape.shape(x).to_vec();
    for a in 0..3 {
        if s[2 + a] % tube[a] != 0 {
            return Err(config_err!("tube {tube:?} does not divide feature extents {:?}", &s[2..]));
        }
    }
    sess.conv(x, prefix, tube, [0; 3])
}

pub fn init_st_ff<E: Element>(init: &mut Init<'_, E>, prefix: &str, d: usize, d_ff: usize) -> Result<()> {
    init.conv(&format!("{prefix}.expand"), d_ff, d, [1, 1, 1], false)?;
    init.norm(&format!("{prefix}.expand_bn"), d_ff)?;
    init.conv(&format!("{prefix}.dw"), d_ff, 1, [3, 3, 3], false)?;
    init.norm(&format!("{prefix}.dw_bn"), d_ff)?;
    init.conv(&format!("{prefix}.project"), d, d_ff, [1, 1, 1], true)
}

/// Point-wise expansion (BN, ELU), depthwise 3×3×3 (BN, ELU), point-wise
/// projection with bias. Operates on `[B,D,T',H',W']` maps.
pub fn st_ff<E: Element>(sess: &mut Session<'_, E>, x: Var, prefix: &str) -> Result<Var> {
    let h = sess.conv(x, &format!("{prefix}.expand"), [1; 3], [0; 3])?;
    let h = sess.batchnorm(h, &format!("{prefix}.expand_bn"))?;
    let h = sess.tape.elu(h)?;
    let w = sess.param(&format!("{prefix}.dw.weight"))?;
    let h = sess.tape.depthwise_conv3d(h, w, [1; 3], [1; 3])?;
    let h = sess.batchnorm(h, &format!("{prefix}.dw_bn"))?;
    let h = sess.tape.elu(h)?;
    sess.conv(h, &format!("{prefix}.project"), [1; 3], [0; 3])
}

/// Attention flavour of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    SelfAttention,
    Periodic,
    CrossSelf,
}

/// Registers one transformer block of width `d`. `slow_dim` is the width of
/// the attended slow features (cross blocks only); `offsets` the number of
/// rows of the relative table (periodic blocks only).
#[allow(clippy::too_many_arguments)]
pub fn init_block<E: Element>(
    init: &mut Init<'_, E>,
    prefix: &str,
    kind: BlockKind,
    d: usize,
    d_ff: usize,
    heads: usize,
    slow_dim: usize,
    offsets: usize,
) -> Result<()> {
    let a = format!("{prefix}.attn");
    for which in ["q", "k"] {
        init.conv(&format!("{a}.{which}"), d, d, [3, 3, 3], false)?;
        init.norm(&format!("{a}.{which}.bn"), d)?;
    }
    init.linear(&format!("{a}.v"), d, d, true)?;
    init.linear(&format!("{a}.u"), d, d, true)?;
    match kind {
        BlockKind::SelfAttention => {}
        // A zero table is a saddle of the attention loss: S = QRᵀ carries
        // no gradient into Q while R = 0.
        BlockKind::Periodic => {
            let dh = d / heads;
            init.normal(&format!("{a}.rel"), vec![offsets, dh], (dh as f64).powf(-0.5))?
        }
        BlockKind::CrossSelf => {
            init.conv(&format!("{a}.ks"), d, slow_dim, [3, 3, 3], false)?;
            init.norm(&format!("{a}.ks.bn"), d)?;
            init.linear(&format!("{a}.vs"), slow_dim, d, true)?;
        }
    }
    init.norm(&format!("{prefix}.ln1"), d)?;
    init_st_ff(init, &format!("{prefix}.ff"), d, d_ff)?;
    init.norm(&format!("{prefix}.ln2"), d)
}

/// Output of one transformer block.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// `[B, D, T', H', W']`.
    pub map: Var,
    pub attention: AttentionOutput,
}

/// Slow-path features attended by a cross block.
#[derive(Clone, Copy, Debug)]
pub struct SlowContext {
    pub map: Var,
}

/// `x1 = LN(x + Attn(x))`, `x2 = LN(x1 + ST-FF(x1))` on a token map.
pub fn transformer_block<E: Element>(
    sess: &mut Session<'_, E>,
    x_map: Var,
    prefix: &str,
    kind: BlockKind,
    cfg: &AttentionConfig,
    slow: Option<SlowContext>,
) -> Result<BlockOutput> {
    let grid = {
        let s = sess.tape.shape(x_map);
        if s.len() != 5 || s[1] != cfg.dim {
            return Err(dim_err!("{prefix}: expected [B,{},T',H',W'], got {s:?}", cfg.dim));
        }
        [s[2], s[3], s[4]]
    };
    let a = format!("{prefix}.attn");
    let tokens = map_to_tokens(&mut sess.tape, x_map)?;
    let (q, k) = project_qk(sess, x_map, &a, cfg.theta)?;
    let v = sess.linear(tokens, &format!("{a}.v"))?;
    let u = Projection { weight: sess.param(&format!("{a}.u.weight"))?, bias: Some(sess.param(&format!("{a}.u.bias"))?) };
    let attn = match kind {
        BlockKind::SelfAttention => attention::td_mhsa(&mut sess.tape, q, k, v, &u, cfg)?,
        BlockKind::Periodic => {
            let table = sess.param(&format!("{a}.rel"))?;
            attention::td_mhpsa(&mut sess.tape, q, k, v, table, &u, cfg)?
        }
        BlockKind::CrossSelf => {
            let slow = slow.ok_or_else(|| config_err!("{prefix}: cross block without slow features"))?;
            let ks = sess.tdc(slow.map, &format!("{a}.ks"), TdcSpec::same(cfg.theta)?)?;
            let ks = sess.batchnorm(ks, &format!("{a}.ks.bn"))?;
            let ks = map_to_tokens(&mut sess.tape, ks)?;
            let slow_tokens = map_to_tokens(&mut sess.tape, slow.map)?;
            let vs = sess.linear(slow_tokens, &format!("{a}.vs"))?;
            attention::td_mhcsa(&mut sess.tape, q, k, v, ks, vs, &u, cfg)?
        }
    };
    let r1 = sess.tape.add(tokens, attn.out)?;
    let x1 = sess.layernorm(r1, &format!("{prefix}.ln1"))?;
    let x1_map = tokens_to_map(&mut sess.tape, x1, grid)?;
    let ff = st_ff(sess, x1_map, &format!("{prefix}.ff"))?;
    let ff = map_to_tokens(&mut sess.tape, ff)?;
    let r2 = sess.tape.add(x1, ff)?;
    let x2 = sess.layernorm(r2, &format!("{prefix}.ln2"))?;
    let map = tokens_to_map(&mut sess.tape, x2, grid)?;
    Ok(BlockOutput { map, attention: attn })
}

pub fn init_lateral<E: Element>(init: &mut Init<'_, E>, d_slow: usize, d_fast: usize) -> Result<()> {
    init.conv("lateral.conv1", d_fast, d_fast, [3, 1, 1], true)?;
    init.conv("lateral.conv2", d_slow, d_slow + d_fast, [1, 1, 1], true)
}

/// `Conv2(Concat(slow, Conv1(fast)))` where Conv1 is a 3×1×1 temporal
/// convolution with stride 2 and padding 1.
pub fn lateral_connect<E: Element>(sess: &mut Session<'_, E>, slow: Var, fast: Var) -> Result<Var> {
    let (ss, fs) = (sess.tape.shape(slow).to_vec(), sess.tape.shape(fast).to_vec());
    if fs[2] != 2 * ss[2] || fs[3..] != ss[3..] {
        return Err(config_err!("lateral connection needs fast T = 2 × slow T, got {fs:?} and {ss:?}"));
    }
    let down = sess.conv(fast, "lateral.conv1", [2, 1, 1], [1, 0, 0])?;
    let cat = sess.tape.concat(&[slow, down], 1)?;
    sess.conv(cat, "lateral.conv2", [1; 3], [0; 3])
}

/// Registers `stages` transposed-convolution stages: every stage but the
/// last outputs `d` channels, the last outputs `d/2`, then a point-wise
/// projection to one channel.
pub fn init_head<E: Element>(init: &mut Init<'_, E>, c_in: usize, d: usize, stages: usize) -> Result<()> {
    let mut c = c_in;
    for i in 0..stages {
        let c_out = if i + 1 == stages { d / 2 } else { d };
        init.fan_in(&format!("head.up.{i}.weight"), vec![c, c_out, 4], c * 4)?;
        init.norm(&format!("head.up.{i}.bn"), c_out)?;
        c = c_out;
    }
    init.conv("head.proj", 1, c, [1, 1, 1], true)
}

/// Transposed temporal convolutions (kernel 4, stride 2, padding 1, then BN
/// and ELU) until the temporal extent reaches `target_t`, spatial mean, and
/// a point-wise projection. Returns `[B, target_t]`.
pub fn predictor_head<E: Element>(sess: &mut Session<'_, E>, x: Var, target_t: usize) -> Result<Var> {
    let t = sess.tape.shape(x)[2];
    let ratio = target_t / t;
    if target_t % t != 0 || !ratio.is_power_of_two() {
        return Err(config_err!("head cannot reach {target_t} frames from {t} by doubling"));
    }
    let mut h = x;
    for i in 0..ratio.trailing_zeros() as usize {
        let w = sess.param(&format!("head.up.{i}.weight"))?;
        h = sess.tape.transposed_temporal_conv(h, w, None, 2, 1)?;
        h = sess.batchnorm(h, &format!("head.up.{i}.bn"))?;
        h = sess.tape.elu(h)?;
    }
    let pooled = sess.tape.spatial_mean(h)?;
    let s = sess.tape.shape(pooled).to_vec();
    let as_map = sess.tape.reshape(pooled, &[s[0], s[1], s[2], 1, 1])?;
    let y = sess.conv(as_map, "head.proj", [1; 3], [0; 3])?;
    sess.tape.reshape(y, &[s[0], s[2]])
}

/// Linear ×2 temporal upsampling used before fusing slow and fast features.
pub fn upsample_slow<E: Element>(sess: &mut Session<'_, E>, x: Var) -> Result<Var> {
    sess.tape.temporal_upsample(x, 2, UpsampleMode::Linear)
}
