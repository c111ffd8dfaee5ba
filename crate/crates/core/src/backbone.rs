//! The 4-level encoder/decoder substrate shared by both modality branches.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{Builder, Conv1x1, Conv3x3, TransformerBlock};
use crate::params::{Ctx, InitKind};
use crate::tape::Var;
use crate::tensor::Real;

/// Number of pyramid levels.
pub const LEVELS: usize = 4;

fn default_levels() -> usize {
    LEVELS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels at the full-resolution level.
    pub base_dim: usize,
    pub level_blocks: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    pub ffn_expansion: f64,
    pub fuse_blocks: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
}

impl BackboneConfig {
    /// Block counts and width of the full-size network.
    pub fn full() -> Self {
        BackboneConfig {
            base_dim: 48,
            level_blocks: [2, 3, 3, 4],
            heads: [1, 2, 4, 8],
            ffn_expansion: 2.66,
            fuse_blocks: 3,
            levels: LEVELS,
        }
    }

    /// Desk-scale configuration used by tests and the demo.
    pub fn toy() -> Self {
        BackboneConfig {
            base_dim: 16,
            level_blocks: [1, 1, 1, 2],
            ..Self::full()
        }
    }

    /// Channel count of level `l` (0-based).
    pub fn dim(&self, l: usize) -> usize {
        self.base_dim << l
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.levels == LEVELS, "levels must be {LEVELS}, got {}", self.levels);
        ensure!(self.base_dim >= 4, "base_dim must be at least 4");
        for l in 0..LEVELS {
            ensure!(
                self.heads[l] > 0 && self.dim(l).is_multiple_of(self.heads[l]),
                "level {} width {} not divisible by {} heads",
                l + 1,
                self.dim(l),
                self.heads[l]
            );
        }
        ensure!(
            self.ffn_expansion.is_finite() && self.ffn_expansion > 0.0,
            "ffn_expansion must be positive"
        );
        Ok(())
    }
}

/// Per-level features, shallowest first: `[C,H,W], [2C,H/2,W/2], [4C,H/4,W/4], [8C,H/8,W/8]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePyramid(pub [Var; LEVELS]);

/// Pointwise conv `C -> C/2`, then pixel-unshuffle by 2: `[C,H,W] -> [2C,H/2,W/2]`.
#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv1x1,
}

impl Downsample {
    pub fn declare<T: Real>(b: &mut Builder<T>, name: &str, dim: usize) -> Result<Self> {
        ensure!(dim.is_multiple_of(2), "downsample needs an even channel count, got {dim}");
        Ok(Downsample {
            conv: Conv1x1::declare(b, &format!("{name}.conv"), dim, dim / 2, false, InitKind::TruncNormal)?,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (_, h, w) = cx.tape.value(x).chw()?;
        ensure!(h % 2 == 0 && w % 2 == 0, "downsample: odd spatial dims {h}x{w}");
        let y = self.conv.forward(cx, x)?;
        cx.tape.pixel_unshuffle(y, 2)
    }
}

/// Pointwise conv `C -> 2C`, then pixel-shuffle by 2: `[C,H,W] -> [C/2,2H,2W]`.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv1x1,
}

impl Upsample {
    pub fn declare<T: Real>(b: &mut Builder<T>, name: &str, dim: usize) -> Result<Self> {
        ensure!(dim.is_multiple_of(2), "upsample needs an even channel count, got {dim}");
        Ok(Upsample {
            conv: Conv1x1::declare(b, &format!("{name}.conv"), dim, dim * 2, false, InitKind::TruncNormal)?,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (c, _, _) = cx.tape.value(x).chw()?;
        ensure!(
            c == self.conv.cin,
            "upsample expects {} channels, got {c}",
            self.conv.cin
        );
        let y = self.conv.forward(cx, x)?;
        cx.tape.pixel_shuffle(y, 2)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    embed: Conv3x3,
    levels: Vec<Vec<TransformerBlock>>,
    downs: Vec<Downsample>,
}

impl Encoder {
    pub fn declare<T: Real>(b: &mut Builder<T>, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let embed = Conv3x3::declare(b, &format!("{name}.embed"), 3, cfg.base_dim, false)?;
        let mut levels = Vec::new();
        let mut downs = Vec::new();
        for l in 0..LEVELS {
            let blocks = (0..cfg.level_blocks[l])
                .map(|i| {
                    TransformerBlock::declare(
                        b,
                        &format!("{name}.level{}.block{i}", l + 1),
                        cfg.dim(l),
                        cfg.heads[l],
                        cfg.ffn_expansion,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            levels.push(blocks);
            if l + 1 < LEVELS {
                downs.push(Downsample::declare(b, &format!("{name}.down{}", l + 1), cfg.dim(l))?);
            }
        }
        Ok(Encoder {
            embed,
            levels,
            downs,
        })
    }

    /// Embeds a `[3,H,W]` image and returns every level's output (levels 1-3
    /// before their downsampling).
    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, image: Var) -> Result<FeaturePyramid> {
        let (c, h, w) = cx.tape.value(image).chw()?;
        ensure!(c == 3, "encoder expects a 3-channel image, got {c}");
        ensure!(
            h % 8 == 0 && w % 8 == 0 && h > 0 && w > 0,
            "encoder input {h}x{w} must have dims divisible by 8"
        );
        let mut x = self.embed.forward(cx, image)?;
        let mut outs = [x; LEVELS];
        for l in 0..LEVELS {
            for block in &self.levels[l] {
                x = block.forward(cx, x)?;
            }
            outs[l] = x;
            if let Some(down) = self.downs.get(l) {
                x = down.forward(cx, x)?;
            }
        }
        Ok(FeaturePyramid(outs))
    }
}

/// One decoder level: upsample the deeper feature, concatenate the encoder
/// skip, reduce to the level width, then run the level's blocks.
#[derive(Debug, Clone)]
pub struct DecoderLevel {
    up: Upsample,
    reduce: Conv1x1,
    blocks: Vec<TransformerBlock>,
    dim: usize,
}

impl DecoderLevel {
    /// `level` is 0-based and must be below the deepest level.
    pub fn declare<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        cfg: &BackboneConfig,
        level: usize,
    ) -> Result<Self> {
        ensure!(level + 1 < LEVELS, "decoder level {level} has no deeper input");
        let dim = cfg.dim(level);
        Ok(DecoderLevel {
            up: Upsample::declare(b, &format!("{name}.up"), cfg.dim(level + 1))?,
            reduce: Conv1x1::declare(b, &format!("{name}.reduce"), 2 * dim, dim, false, InitKind::TruncNormal)?,
            blocks: (0..cfg.level_blocks[level])
                .map(|i| {
                    TransformerBlock::declare(
                        b,
                        &format!("{name}.block{i}"),
                        dim,
                        cfg.heads[level],
                        cfg.ffn_expansion,
                    )
                })
                .collect::<Result<Vec<_>>>()?,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, deep: Var, skip: Var) -> Result<Var> {
        let (sc, sh, sw) = cx.tape.value(skip).chw()?;
        let (dc, dh, dw) = cx.tape.value(deep).chw()?;
        ensure!(
            sc == self.dim && dc == 2 * self.dim && dh * 2 == sh && dw * 2 == sw,
            "decoder level: deep {:?} and skip {:?} do not follow the pyramid law",
            cx.tape.value(deep).dims(),
            cx.tape.value(skip).dims()
        );
        let up = self.up.forward(cx, deep)?;
        let cat = cx.tape.concat(&[up, skip])?;
        let mut x = self.reduce.forward(cx, cat)?;
        for block in &self.blocks {
            x = block.forward(cx, x)?;
        }
        Ok(x)
    }
}

/// Renders the fused image from the two full-resolution features.
#[derive(Debug, Clone)]
pub struct FuseBlock {
    blocks: Vec<TransformerBlock>,
    out: Conv3x3,
    dim: usize,
}

impl FuseBlock {
    pub fn declare<T: Real>(b: &mut Builder<T>, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let dim = 2 * cfg.base_dim;
        Ok(FuseBlock {
            blocks: (0..cfg.fuse_blocks)
                .map(|i| {
                    TransformerBlock::declare(b, &format!("{name}.block{i}"), dim, cfg.heads[0], cfg.ffn_expansion)
                })
                .collect::<Result<Vec<_>>>()?,
            out: Conv3x3::declare(b, &format!("{name}.out"), dim, 3, true)?,
            dim,
        })
    }

    /// Returns a `[3,H,W]` image with values in `(0, 1)`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, f_vis: Var, f_ir: Var) -> Result<Var> {
        let a = cx.tape.value(f_vis).dims().to_vec();
        let b = cx.tape.value(f_ir).dims().to_vec();
        ensure!(
            a == b && a.len() == 3 && 2 * a[0] == self.dim,
            "fuse block: features {a:?} and {b:?} must both be [{}, H, W]",
            self.dim / 2
        );
        let mut x = cx.tape.concat(&[f_vis, f_ir])?;
        for block in &self.blocks {
            x = block.forward(cx, x)?;
        }
        let y = self.out.forward(cx, x)?;
        Ok(cx.tape.sigmoid(y))
    }
}
