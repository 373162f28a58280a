//! Temporal-difference multi-head attention: self (TD-MHSA), cross plus
//! self (TD-MHCSA) and periodic plus self (TD-MHPSA).
//!
//! Queries and keys come from TDC projections of a token map followed by
//! batch norm ([`project_qk`]); values come from a point-wise linear map.
//! All attention functions here take token tensors `[B, L, D]`, split them
//! into `h` heads of width `D/h`, and finish with the output projection `U`.
//!
//! For head `i` the three variants compute
//!
//! ```text
//! SA_i   = softmax(Q_i K_iᵀ / τ) V_i
//! CSA_i  = softmax(Q_i K_slow,iᵀ / τ) V_slow,i + SA_i
//! CPSA_i = softmax((Q_i K_iᵀ + λ S_i) / τ) V_i,   S_i = Q_i Rᵀ
//! ```
//!
//! `R` holds one learnable vector per signed token offset `j - i`. Rather
//! than building the `L × L × D_h` tensor of relative vectors, `Q_i` is
//! multiplied by the `(2L-1) × D_h` table once and the result is skewed so
//! that column `j` of row `i` picks offset `j - i`.

use std::io::Write;

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, dim_err, param_err, Result};
use crate::nn::{map_to_tokens, Session};
use crate::tdc::TdcSpec;
use crate::tensor::{Element, Tensor};

/// Hyperparameters of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub tau: f64,
    pub theta: f64,
    /// Weight of the periodic logits; only read by TD-MHPSA.
    pub lambda: f64,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize, tau: f64, theta: f64, lambda: f64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("attention dim {dim} is not divisible by {heads} heads"));
        }
        if !(tau > 0.0) {
            return Err(param_err!("attention temperature must be positive, got {tau}"));
        }
        if !(0.0..=1.0).contains(&theta) {
            return Err(param_err!("theta must lie in [0, 1], got {theta}"));
        }
        Ok(Self { dim, heads, tau, theta, lambda })
    }

    /// `τ = 2`, `θ = 0.7`, `λ = 0.5`, four heads.
    pub fn with_defaults(dim: usize) -> Result<Self> {
        Self::new(dim, 4, 2.0, 0.7, 0.5)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Output projection `x·W + b` applied after the heads are concatenated.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Projection {
    pub fn apply<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => {
                let axis = tape.shape(y).len() - 1;
                tape.add_bias(y, b, axis)
            }
            None => Ok(y),
        }
    }
}

/// Result of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `[B, L_q, D]` after the output projection.
    pub out: Var,
    /// Concatenated heads before the output projection, `[B, L_q, D]`.
    pub heads: Var,
    /// Attention weights `[B, h, L_q, L_k]`, one per softmax term
    /// (cross first for TD-MHCSA).
    pub weights: Vec<Var>,
    /// Periodic logits `S` `[B, h, L, L]` (TD-MHPSA only).
    pub periodic: Option<Var>,
}

/// Relative periodicity table: one `D_h`-wide vector per signed offset
/// `-(L_max-1)..=(L_max-1)`, stored as `[2 L_max - 1, D_h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicEncoding<E: Element = f32> {
    pub table: Tensor<E>,
}

impl<E: Element> PeriodicEncoding<E> {
    pub fn new(table: Tensor<E>) -> Result<Self> {
        let s = table.shape();
        if s.len() != 2 || s[0] % 2 == 0 {
            return Err(dim_err!("periodic encoding must be [2L-1, D_h], got {s:?}"));
        }
        Ok(Self { table })
    }

    pub fn max_offset(&self) -> usize {
        (self.table.shape()[0] - 1) / 2
    }

    /// The vector for signed offset `offset`.
    pub fn lookup(&self, offset: isize) -> Option<&[E]> {
        let m = self.max_offset() as isize;
        if offset.abs() > m {
            return None;
        }
        let d = self.table.shape()[1];
        let row = (offset + m) as usize;
        Some(&self.table.data()[row * d..(row + 1) * d])
    }
}

/// `[B, L, D] → [B, h, L, D/h]`.
pub fn split_heads<E: Element>(tape: &mut Tape<E>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] % heads != 0 {
        return Err(dim_err!("cannot split {s:?} into {heads} heads"));
    }
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, h, L, D_h] → [B, L, h·D_h]`.
pub fn merge_heads<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(dim_err!("merge_heads expects [B,h,L,D_h], got {s:?}"));
    }
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// One softmax-attention term on split heads: returns `(context, weights)`.
fn attend<E: Element>(tape: &mut Tape<E>, q: Var, k: Var, v: Var, tau: f64, extra: Option<Var>) -> Result<(Var, Var)> {
    let kt = tape.transpose(k, 2, 3)?;
    let mut logits = tape.matmul(q, kt)?;
    if let Some(e) = extra {
        logits = tape.add(logits, e)?;
    }
    let w = tape.softmax_temp(logits, tau)?;
    let ctx = tape.matmul(w, v)?;
    Ok((ctx, w))
}

fn check_tokens<E: Element>(tape: &Tape<E>, cfg: &AttentionConfig, vars: &[(Var, &str)]) -> Result<()> {
    for &(v, name) in vars {
        let s = tape.shape(v);
        if s.len() != 3 || s[2] != cfg.dim {
            return Err(dim_err!("{name} must be [B, L, {}], got {s:?}", cfg.dim));
        }
    }
    Ok(())
}

fn same_length<E: Element>(tape: &Tape<E>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa[..2] != sb[..2] {
        return Err(dim_err!("{what}: token counts differ, {sa:?} vs {sb:?}"));
    }
    Ok(())
}

/// Multi-head self-attention with temperature `τ`.
pub fn td_mhsa<E: Element>(
    tape: &mut Tape<E>,
    q: Var,
    k: Var,
    v: Var,
    u: &Projection,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    check_tokens(tape, cfg, &[(q, "Q"), (k, "K"), (v, "V")])?;
    same_length(tape, q, k, "td_mhsa Q/K")?;
    same_length(tape, k, v, "td_mhsa K/V")?;
    let (qh, kh, vh) = (split_heads(tape, q, cfg.heads)?, split_heads(tape, k, cfg.heads)?, split_heads(tape, v, cfg.heads)?);
    let (ctx, w) = attend(tape, qh, kh, vh, cfg.tau, None)?;
    let heads = merge_heads(tape, ctx)?;
    let out = u.apply(tape, heads)?;
    Ok(AttentionOutput { out, heads, weights: vec![w], periodic: None })
}

/// Fast-path self-attention plus cross-attention onto slow-path keys and
/// values. Slow keys/values must already be projected to the fast width.
#[allow(clippy::too_many_arguments)]
pub fn td_mhcsa<E: Element>(
    tape: &mut Tape<E>,
    q_fast: Var,
    k_fast: Var,
    v_fast: Var,
    k_slow: Var,
    v_slow: Var,
    u: &Projection,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    check_tokens(tape, cfg, &[(q_fast, "Q_fast"), (k_fast, "K_fast"), (v_fast, "V_fast"), (k_slow, "K_slow"), (v_slow, "V_slow")])?;
    same_length(tape, q_fast, k_fast, "td_mhcsa fast Q/K")?;
    same_length(tape, k_fast, v_fast, "td_mhcsa fast K/V")?;
    same_length(tape, k_slow, v_slow, "td_mhcsa slow K/V")?;
    let h = cfg.heads;
    let qh = split_heads(tape, q_fast, h)?;
    let (kfh, vfh) = (split_heads(tape, k_fast, h)?, split_heads(tape, v_fast, h)?);
    let (ksh, vsh) = (split_heads(tape, k_slow, h)?, split_heads(tape, v_slow, h)?);
    let (cross, wc) = attend(tape, qh, ksh, vsh, cfg.tau, None)?;
    let (own, ws) = attend(tape, qh, kfh, vfh, cfg.tau, None)?;
    let ctx = tape.add(cross, own)?;
    let heads = merge_heads(tape, ctx)?;
    let out = u.apply(tape, heads)?;
    Ok(AttentionOutput { out, heads, weights: vec![wc, ws], periodic: None })
}

/// `S = Q Rᵀ` for split-head queries `[B, h, L, D_h]` and a relative table
/// `[R, D_h]` with `R ≥ 2L - 1` rows centred on offset 0.
pub fn relative_logits<E: Element>(tape: &mut Tape<E>, q_heads: Var, table: Var) -> Result<Var> {
    let qs = tape.shape(q_heads).to_vec();
    let ts = tape.shape(table).to_vec();
    if qs.len() != 4 || ts.len() != 2 || ts[1] != qs[3] {
        return Err(dim_err!("relative table {ts:?} does not match queries {qs:?}"));
    }
    let l = qs[2];
    let need = 2 * l - 1;
    if ts[0] < need || ts[0] % 2 == 0 {
        return Err(dim_err!("relative table covers {} offsets but {l} tokens need {need}", ts[0]));
    }
    let centred = tape.narrow(table, 0, (ts[0] - need) / 2, need)?;
    let rt = tape.transpose(centred, 0, 1)?;
    let m = tape.matmul(q_heads, rt)?;
    tape.rel_skew(m)
}

/// Periodic plus self-attention. Returns `S` in [`AttentionOutput::periodic`].
pub fn td_mhpsa<E: Element>(
    tape: &mut Tape<E>,
    q: Var,
    k: Var,
    v: Var,
    table: Var,
    u: &Projection,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    check_tokens(tape, cfg, &[(q, "Q"), (k, "K"), (v, "V")])?;
    same_length(tape, q, k, "td_mhpsa Q/K")?;
    same_length(tape, k, v, "td_mhpsa K/V")?;
    let (qh, kh, vh) = (split_heads(tape, q, cfg.heads)?, split_heads(tape, k, cfg.heads)?, split_heads(tape, v, cfg.heads)?);
    let s = relative_logits(tape, qh, table)?;
    let extra = if cfg.lambda == 0.0 { None } else { Some(tape.scale(s, cfg.lambda)?) };
    let (ctx, w) = attend(tape, qh, kh, vh, cfg.tau, extra)?;
    let heads = merge_heads(tape, ctx)?;
    let out = u.apply(tape, heads)?;
    Ok(AttentionOutput { out, heads, weights: vec![w], periodic: Some(s) })
}

/// Averages `[.., L, L]` periodic logits over spatial token blocks of size
/// `spatial = H'·W'`, giving `[.., T', T']`.
pub fn pool_periodic<E: Element>(tape: &mut Tape<E>, s: Var, spatial: usize) -> Result<Var> {
    tape.block_mean(s, spatial)
}

/// `Q = BN(TDC(x))`, `K = BN(TDC(x))` with independent weights under
/// `<prefix>.q` and `<prefix>.k`, returned as `[B, L, D_out]` tokens.
pub fn project_qk<E: Element>(sess: &mut Session<'_, E>, x_map: Var, prefix: &str, theta: f64) -> Result<(Var, Var)> {
    let spec = TdcSpec::same(theta)?;
    let mut out = [x_map; 2];
    for (slot, which) in out.iter_mut().zip(["q", "k"]) {
        let p = format!("{prefix}.{which}");
        let expect_in = sess.store().get(&format!("{p}.weight"))?.shape()[1];
        if sess.tape.shape(x_map).get(1) != Some(&expect_in) {
            return Err(dim_err!("{p}: projection expects {expect_in} channels, input is {:?}", sess.tape.shape(x_map)));
        }
        let y = sess.tdc(x_map, &p, spec)?;
        let y = sess.batchnorm(y, &format!("{p}.bn"))?;
        *slot = map_to_tokens(&mut sess.tape, y)?;
    }
    Ok((out[0], out[1]))
}

/// Writes a 2-D map as an 8-bit binary PGM with linear min-max scaling.
/// A constant map is written as mid-grey.
pub fn write_pgm<E: Element, W: Write>(out: &mut W, map: &Tensor<E>) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(dim_err!("PGM export needs a 2-D map, got {s:?}"));
    }
    let vals = map.to_f64_vec();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    write!(out, "P5\n{} {}\n255\n", s[1], s[0])?;
    let bytes: Vec<u8> = vals
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 })
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}
