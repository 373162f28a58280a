//! PhysFormer and PhysFormer++.
//!
//! Both models map a batch of RGB clips `[B, 3, T, H, W]` to rPPG signals
//! `[B, T]`. PhysFormer is stem, tube tokenizer, `N` TD-MHSA blocks and the
//! predictor head. PhysFormer++ shares the stem and splits into a slow path
//! (`3N'` TD-MHPSA blocks on `4×4×4` tubes) and a fast path (`N'` TD-MHSA
//! then `2N'` TD-MHCSA blocks on `2×4×4` tubes at half width). Fast
//! cross-attention block `k` attends the output of slow block `N' + k`; after
//! the mid stage the fast features are folded into the slow path by the
//! lateral connection; the slow output is upsampled ×2 in time, concatenated
//! with the fast output, and decoded by the head.

mod blocks;
pub mod checkpoint;
mod config;

pub use blocks::*;
pub use config::{tube_grid, ModelConfig, ModelKind};

use crate::attention::pool_periodic;
use crate::autodiff::Var;
use crate::error::{dim_err, Result};
use crate::nn::{Init, Mode, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// A configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<E: Element = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<E>,
}

/// Everything a forward pass exposes to losses and inspection tools.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Predicted signal `[B, T]`.
    pub signal: Var,
    /// Spatially pooled periodic logits `S'`, one `[B, h, T', T']` per
    /// TD-MHPSA block (empty for PhysFormer).
    pub periodic_maps: Vec<Var>,
    /// Attention weights by block name, `[B, h, L_q, L_k]` each.
    pub attention: Vec<(String, Var)>,
}

impl<E: Element> Model<E> {
    /// Initializes all parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::derive(seed, 0x5eed);
        let mut init = Init { store: &mut params, rng: &mut rng };
        init_params(&mut init, &config)?;
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Runs the model without recording gradients.
    pub fn predict(&self, clips: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        let mut sess = Session::new(&self.params, mode, false);
        let x = sess.tape.constant(clips.clone());
        let out = forward(&mut sess, &self.config, x)?;
        Ok(sess.tape.value(out.signal).clone())
    }
}

fn init_params<E: Element>(init: &mut Init<'_, E>, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.dim;
    init_stem(init, cfg.stem_channels())?;
    match cfg.kind {
        ModelKind::PhysFormer => {
            init_tokenizer(init, "tokenizer", d, d, cfg.slow_tube)?;
            for i in 0..cfg.blocks {
                init_block(init, &format!("blocks.{i}"), BlockKind::SelfAttention, d, cfg.ff_dim, cfg.heads, 0, 0)?;
            }
            init_head(init, d, d, cfg.head_stages())
        }
        ModelKind::PhysFormerPP => {
            let (df, dff) = (cfg.fast_dim(), cfg.fast_ff_dim());
            let n = cfg.n_prime();
            let l_slow: usize = cfg.slow_grid().iter().product();
            init_tokenizer(init, "slow.tokenizer", d, d, cfg.slow_tube)?;
            init_tokenizer(init, "fast.tokenizer", d, df, cfg.fast_tube)?;
            for i in 0..3 * n {
                init_block(init, &format!("slow.blocks.{i}"), BlockKind::Periodic, d, cfg.ff_dim, cfg.heads, 0, 2 * l_slow - 1)?;
            }
            for i in 0..3 * n {
                let kind = if i < n { BlockKind::SelfAttention } else { BlockKind::CrossSelf };
                init_block(init, &format!("fast.blocks.{i}"), kind, df, dff, cfg.heads, d, 0)?;
            }
            init_lateral(init, d, df)?;
            init_head(init, d + df, d, cfg.head_stages())
        }
    }
}

/// Records a forward pass of `cfg` on `x` (`[B, 3, T, H, W]`).
pub fn forward<E: Element>(sess: &mut Session<'_, E>, cfg: &ModelConfig, x: Var) -> Result<ModelOutput> {
    let s = sess.tape.shape(x).to_vec();
    if s.len() != 5 || s[1] != 3 || s[2..] != [cfg.frames, cfg.height, cfg.width] {
        return Err(dim_err!(
            "model expects [B, 3, {}, {}, {}], got {s:?}",
            cfg.frames,
            cfg.height,
            cfg.width
        ));
    }
    let stem_out = stem(sess, x)?;
    let mut attention = Vec::new();
    let mut periodic_maps = Vec::new();
    let features = match cfg.kind {
        ModelKind::PhysFormer => {
            let att = cfg.attention()?;
            let mut h = tube_tokenize(sess, stem_out, "tokenizer", cfg.slow_tube)?;
            for i in 0..cfg.blocks {
                let name = format!("blocks.{i}");
                let o = transformer_block(sess, h, &name, BlockKind::SelfAttention, &att, None)?;
                attention.push((name, o.attention.weights[0]));
                h = o.map;
            }
            h
        }
        ModelKind::PhysFormerPP => {
            let (att_s, att_f) = (cfg.attention()?, cfg.fast_attention()?);
            let n = cfg.n_prime();
            let spatial = cfg.slow_grid()[1] * cfg.slow_grid()[2];
            let mut slow = tube_tokenize(sess, stem_out, "slow.tokenizer", cfg.slow_tube)?;
            let mut fast = tube_tokenize(sess, stem_out, "fast.tokenizer", cfg.fast_tube)?;
            for i in 0..3 * n {
                if i == 2 * n {
                    slow = lateral_connect(sess, slow, fast)?;
                }
                let name = format!("slow.blocks.{i}");
                let o = transformer_block(sess, slow, &name, BlockKind::Periodic, &att_s, None)?;
                let s_map = o.attention.periodic.expect("periodic block returns S");
                periodic_maps.push(pool_periodic(&mut sess.tape, s_map, spatial)?);
                attention.push((name, o.attention.weights[0]));
                slow = o.map;

                let name = format!("fast.blocks.{i}");
                let (kind, ctx) = if i < n {
                    (BlockKind::SelfAttention, None)
                } else {
                    (BlockKind::CrossSelf, Some(SlowContext { map: slow }))
                };
                let o = transformer_block(sess, fast, &name, kind, &att_f, ctx)?;
                attention.push((name, *o.attention.weights.last().expect("weights")));
                fast = o.map;
            }
            let up = upsample_slow(sess, slow)?;
            sess.tape.concat(&[up, fast], 1)?
        }
    };
    let signal = predictor_head(sess, features, cfg.frames)?;
    Ok(ModelOutput { signal, periodic_maps, attention })
}
