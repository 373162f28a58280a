use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{config_err, Result};

/// Which architecture a configuration describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[serde(alias = "physformer")]
    PhysFormer,
    #[serde(rename = "physformerpp", alias = "physformer++")]
    PhysFormerPP,
}

impl std::str::FromStr for ModelKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "physformer" => Ok(Self::PhysFormer),
            "physformerpp" | "physformer++" => Ok(Self::PhysFormerPP),
            other => Err(config_err!("unknown model `{other}` (expected physformer or physformerpp)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PhysFormer => "physformer",
            Self::PhysFormerPP => "physformerpp",
        })
    }
}

/// Architecture hyperparameters.
///
/// `blocks` is `N`. For PhysFormer++ it must be `3N'`: the slow path runs
/// `3N'` periodic blocks and the fast path `N'` self-attention blocks
/// followed by `2N'` cross-attention blocks. The fast path works at half the
/// channel width (`D/2`, hidden `D'/2`) and twice the token rate of the slow
/// path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub tau: f64,
    pub theta: f64,
    pub lambda: f64,
    pub blocks: usize,
    /// Tube of the single PhysFormer tokenizer, or of the slow tokenizer.
    pub slow_tube: [usize; 3],
    /// Tube of the PhysFormer++ fast tokenizer.
    pub fast_tube: [usize; 3],
}

impl ModelConfig {
    /// `3×160×128×128` input, `D = 96`, `D' = 144`, `N = 12`, four heads,
    /// `τ = 2`, `θ = 0.7`, `λ = 0.5`, tubes `4×4×4` and `2×4×4`.
    pub fn full(kind: ModelKind) -> Self {
        Self {
            kind,
            frames: 160,
            height: 128,
            width: 128,
            dim: 96,
            ff_dim: 144,
            heads: 4,
            tau: 2.0,
            theta: 0.7,
            lambda: 0.5,
            blocks: 12,
            slow_tube: [4, 4, 4],
            fast_tube: [2, 4, 4],
        }
    }

    /// Reduced configuration for CPU training: `3×96×64×64`, `D = 32`,
    /// `D' = 48`, `N = 4` (PhysFormer) or `N' = 2` (PhysFormer++).
    pub fn desk(kind: ModelKind) -> Self {
        Self {
            frames: 96,
            height: 64,
            width: 64,
            dim: 32,
            ff_dim: 48,
            blocks: match kind {
                ModelKind::PhysFormer => 4,
                ModelKind::PhysFormerPP => 6,
            },
            ..Self::full(kind)
        }
    }

    /// `N'` of PhysFormer++.
    pub fn n_prime(&self) -> usize {
        self.blocks / 3
    }

    pub fn fast_dim(&self) -> usize {
        self.dim / 2
    }

    pub fn fast_ff_dim(&self) -> usize {
        self.ff_dim / 2
    }

    /// Channel widths of the three stem blocks: `D/4, D/2, D`.
    pub fn stem_channels(&self) -> [usize; 3] {
        [self.dim / 4, self.dim / 2, self.dim]
    }

    /// Stem output extents `(T, H/8, W/8)`.
    pub fn stem_extent(&self) -> [usize; 3] {
        [self.frames, self.height / 8, self.width / 8]
    }

    /// Token grid `(T', H', W')` of the slow (or only) path.
    pub fn slow_grid(&self) -> [usize; 3] {
        tube_grid(self.stem_extent(), self.slow_tube)
    }

    pub fn fast_grid(&self) -> [usize; 3] {
        tube_grid(self.stem_extent(), self.fast_tube)
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.dim, self.heads, self.tau, self.theta, self.lambda)
    }

    pub fn fast_attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.fast_dim(), self.heads, self.tau, self.theta, self.lambda)
    }

    /// Number of ×2 transposed-convolution stages in the head.
    pub fn head_stages(&self) -> usize {
        let t_feat = match self.kind {
            ModelKind::PhysFormer => self.slow_grid()[0],
            ModelKind::PhysFormerPP => self.fast_grid()[0],
        };
        (self.frames / t_feat).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(config_err!("input {}×{} is not divisible by 8", self.height, self.width));
        }
        if self.dim % 4 != 0 || self.dim == 0 {
            return Err(config_err!("D = {} must be a positive multiple of 4", self.dim));
        }
        if self.ff_dim == 0 || self.blocks == 0 {
            return Err(config_err!("D' and N must be positive"));
        }
        self.attention()?;
        let stem = self.stem_extent();
        let mut tubes = vec![("slow", self.slow_tube)];
        if self.kind == ModelKind::PhysFormerPP {
            tubes.push(("fast", self.fast_tube));
        }
        for (name, tube) in &tubes {
            for a in 0..3 {
                if tube[a] == 0 || stem[a] % tube[a] != 0 {
                    return Err(config_err!("{name} tube {tube:?} does not divide the stem output {stem:?}"));
                }
            }
        }
        let t_feat = match self.kind {
            ModelKind::PhysFormer => self.slow_grid()[0],
            ModelKind::PhysFormerPP => {
                if self.blocks % 3 != 0 {
                    return Err(config_err!("PhysFormer++ needs N = 3N', got N = {}", self.blocks));
                }
                if self.slow_tube[0] != 2 * self.fast_tube[0] || self.slow_tube[1..] != self.fast_tube[1..] {
                    return Err(config_err!(
                        "fast tube {:?} must halve the temporal extent of slow tube {:?}",
                        self.fast_tube,
                        self.slow_tube
                    ));
                }
                if self.dim % 2 != 0 || self.ff_dim < 2 {
                    return Err(config_err!("D and D' must be even for the fast path"));
                }
                self.fast_attention()?;
                self.fast_grid()[0]
            }
        };
        let ratio = self.frames / t_feat;
        if self.frames % t_feat != 0 || !ratio.is_power_of_two() || ratio < 2 {
            return Err(config_err!("head cannot upsample {t_feat} frames to {} by doubling", self.frames));
        }
        Ok(())
    }
}

/// Token grid for a tube: `floor(extent / tube)` per axis.
pub fn tube_grid(extent: [usize; 3], tube: [usize; 3]) -> [usize; 3] {
    [extent[0] / tube[0], extent[1] / tube[1], extent[2] / tube[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parses_and_serializes() {
        assert_eq!("physformer++".parse::<ModelKind>().unwrap(), ModelKind::PhysFormerPP);
        assert_eq!(serde_json::to_string(&ModelKind::PhysFormerPP).unwrap(), "\"physformerpp\"");
        assert!("resnet".parse::<ModelKind>().is_err());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut c = ModelConfig::desk(ModelKind::PhysFormer);
        c.height = 60;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(ModelKind::PhysFormerPP);
        c.blocks = 4;
        assert!(c.validate().is_err());
    }
}
