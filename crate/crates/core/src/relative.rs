//! Relative-dominance guided enhancement applied at every decoder level.
//!
//! Each modality estimates a per-pixel dominance map. The other modality's
//! map then gates (a) a cross-modal residual that injects the dominant
//! modality's features and (b) a prompt-conditioned self refinement. The two
//! refined streams are merged by a pointwise conv that starts as their mean,
//! and both residuals start at zero, so a freshly initialized block is an
//! exact identity.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{ensure, Result};
use crate::nn::{Builder, Conv1x1, Conv3x3, TransformerBlock};
use crate::params::{Ctx, InitKind};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vis,
    Ir,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Vis, Modality::Ir];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Vis => "vis",
            Modality::Ir => "ir",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Vis => Modality::Ir,
            Modality::Ir => Modality::Vis,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-pixel dominance weights of one modality at one decoder level.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDominanceMap {
    pub modality: Modality,
    /// 1-based, 1 = full resolution.
    pub level: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major, each value strictly inside (0, 1).
    pub weights: Vec<f64>,
}

impl RelativeDominanceMap {
    pub fn from_tensor<T: Real>(modality: Modality, level: usize, t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        ensure!(c == 1, "dominance map must have one channel, got {c}");
        Ok(RelativeDominanceMap {
            modality,
            level,
            height: h,
            width: w,
            weights: t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        })
    }

    /// 8-bit grayscale heatmap, `round(255 * w)`.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.weights
            .iter()
            .map(|&w| (w * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Number of learnable prompt components.
    pub n: usize,
    /// Spatial size of each component before resizing.
    pub base_size: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig { n: 5, base_size: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReFlags {
    pub use_ce: bool,
    pub use_se: bool,
}

impl Default for ReFlags {
    fn default() -> Self {
        ReFlags {
            use_ce: true,
            use_se: true,
        }
    }
}

/// Refine block producing dominance logits: transformer block, then a
/// pointwise conv to one channel.
#[derive(Debug, Clone)]
pub struct DominanceHead {
    block: TransformerBlock,
    conv: Conv1x1,
}

impl DominanceHead {
    pub fn declare<T: Real>(b: &mut Builder<T>, name: &str, dim: usize, heads: usize, ffn: f64) -> Result<Self> {
        Ok(DominanceHead {
            block: TransformerBlock::declare(b, &format!("{name}.block"), dim, heads, ffn)?,
            conv: Conv1x1::declare(b, &format!("{name}.conv"), dim, 1, true, InitKind::TruncNormal)?,
        })
    }

    pub fn conv_weight(&self) -> &str {
        self.conv.weight_name()
    }

    pub fn logits<T: Real>(&self, cx: &mut Ctx<T>, f: Var) -> Result<Var> {
        let y = self.block.forward(cx, f)?;
        self.conv.forward(cx, y)
    }

    /// `sigmoid(conv(block(f)))`, shape `[1,H,W]`.
    pub fn compute_rd<T: Real>(&self, cx: &mut Ctx<T>, f: Var) -> Result<Var> {
        let l = self.logits(cx, f)?;
        Ok(cx.tape.sigmoid(l))
    }
}

/// `f + proj(block(reduce([f ; rd_other * f_other])))`, `proj` zero-initialized.
#[derive(Debug, Clone)]
pub struct CrossEnhance {
    reduce: Conv1x1,
    block: TransformerBlock,
    proj: Conv1x1,
}

impl CrossEnhance {
    pub fn declare<T: Real>(b: &mut Builder<T>, name: &str, dim: usize, heads: usize, ffn: f64) -> Result<Self> {
        Ok(CrossEnhance {
            reduce: Conv1x1::declare(b, &format!("{name}.reduce"), 2 * dim, dim, false, InitKind::TruncNormal)?,
            block: TransformerBlock::declare(b, &format!("{name}.block"), dim, heads, ffn)?,
            proj: Conv1x1::declare(b, &format!("{name}.proj"), dim, dim, true, InitKind::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, f_self: Var, f_other: Var, rd_other: Var) -> Result<Var> {
        ensure!(
            cx.tape.value(f_self).dims() == cx.tape.value(f_other).dims(),
            "cross enhance: features {:?} and {:?} differ",
            cx.tape.value(f_self).dims(),
            cx.tape.value(f_other).dims()
        );
        let gated = cx.tape.mul_map(f_other, rd_other)?;
        let cat = cx.tape.concat(&[f_self, gated])?;
        let y = self.reduce.forward(cx, cat)?;
        let y = self.block.forward(cx, y)?;
        let y = self.proj.forward(cx, y)?;
        cx.tape.add(f_self, y)
    }
}

/// Dominance-weighted mixture of learnable prompt components.
#[derive(Debug, Clone)]
pub struct RelativePrompt {
    weight: String,
    bias: String,
    bank: String,
    conv: Conv3x3,
    dim: usize,
}

impl RelativePrompt {
    pub fn declare<T: Real>(b: &mut Builder<T>, name: &str, dim: usize, cfg: &PromptConfig) -> Result<Self> {
        ensure!(cfg.n >= 1, "prompt bank needs at least one component");
        ensure!(cfg.base_size >= 1, "prompt base size must be positive");
        Ok(RelativePrompt {
            weight: b.add(format!("{name}.linear.weight"), &[cfg.n, dim], InitKind::TruncNormal)?,
            bias: b.add(format!("{name}.linear.bias"), &[cfg.n], InitKind::Zeros)?,
            bank: b.add(
                format!("{name}.components"),
                &[cfg.n, dim, cfg.base_size, cfg.base_size],
                InitKind::Uniform,
            )?,
            conv: Conv3x3::declare(b, &format!("{name}.conv"), dim, dim, false)?,
            dim,
        })
    }

    /// Mixture weights: softmax of a linear map of `GAP(f * rd_other)`.
    pub fn weights<T: Real>(&self, cx: &mut Ctx<T>, f: Var, rd_other: Var) -> Result<Var> {
        let (c, _, _) = cx.tape.value(f).chw()?;
        ensure!(
            c == self.dim,
            "relative prompt: bank has {} channels, feature has {c}",
            self.dim
        );
        let m = cx.tape.mul_map(f, rd_other)?;
        let gap = cx.tape.spatial_mean(m)?;
        let w = cx.param(&self.weight)?;
        let b = cx.param(&self.bias)?;
        let logits = cx.tape.linear(gap, w, b)?;
        Ok(cx.tape.softmax(logits))
    }

    /// Prompt of shape `[C,H,W]` matching `f`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, f: Var, rd_other: Var) -> Result<Var> {
        let (_, h, w) = cx.tape.value(f).chw()?;
        let weights = self.weights(cx, f, rd_other)?;
        let bank = cx.param(&self.bank)?;
        let p = cx.tape.mix(weights, bank)?;
        let p = cx.tape.resize_bilinear(p, h, w)?;
        self.conv.forward(cx, p)
    }
}

/// `f + proj(block(reduce([f ; prompt])))`, `proj` zero-initialized.
#[derive(Debug, Clone)]
pub struct SelfEnhance {
    reduce: Conv1x1,
    block: TransformerBlock,
    proj: Conv1x1,
}

impl SelfEnhance {
    pub fn declare<T: Real>(b: &mut Builder<T>, name: &str, dim: usize, heads: usize, ffn: f64) -> Result<Self> {
        Ok(SelfEnhance {
            reduce: Conv1x1::declare(b, &format!("{name}.reduce"), 2 * dim, dim, false, InitKind::TruncNormal)?,
            block: TransformerBlock::declare(b, &format!("{name}.block"), dim, heads, ffn)?,
            proj: Conv1x1::declare(b, &format!("{name}.proj"), dim, dim, true, InitKind::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, f: Var, prompt: Var) -> Result<Var> {
        ensure!(
            cx.tape.value(f).dims() == cx.tape.value(prompt).dims(),
            "self enhance: feature {:?} and prompt {:?} differ",
            cx.tape.value(f).dims(),
            cx.tape.value(prompt).dims()
        );
        let cat = cx.tape.concat(&[f, prompt])?;
        let y = self.reduce.forward(cx, cat)?;
        let y = self.block.forward(cx, y)?;
        let y = self.proj.forward(cx, y)?;
        cx.tape.add(f, y)
    }
}

#[derive(Debug, Clone)]
struct Branch {
    rd: DominanceHead,
    ce: Option<CrossEnhance>,
    se: Option<(RelativePrompt, SelfEnhance)>,
    merge: Conv1x1,
}

/// Enhanced features and dominance maps of one level.
#[derive(Debug, Clone, Copy)]
pub struct ReOutput {
    pub enhanced_vis: Var,
    pub enhanced_ir: Var,
    pub rd_vis: Var,
    pub rd_ir: Var,
}

/// The relative enhancement block of one decoder level, both modalities.
#[derive(Debug, Clone)]
pub struct RelativeEnhancement {
    branches: [Branch; 2],
    pair_softmax: bool,
}

impl RelativeEnhancement {
    /// `level` is 0-based.
    pub fn declare<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        backbone: &BackboneConfig,
        level: usize,
        prompt: &PromptConfig,
        flags: ReFlags,
        pair_softmax: bool,
    ) -> Result<Self> {
        let dim = backbone.dim(level);
        let heads = backbone.heads[level];
        let ffn = backbone.ffn_expansion;
        let branch = |b: &mut Builder<T>, m: Modality| -> Result<Branch> {
            let p = format!("{name}.{}", m.tag());
            let ce = if flags.use_ce {
                Some(CrossEnhance::declare(b, &format!("{p}.ce"), dim, heads, ffn)?)
            } else {
                None
            };
            let se = if flags.use_se {
                Some((
                    RelativePrompt::declare(b, &format!("{p}.prompt"), dim, prompt)?,
                    SelfEnhance::declare(b, &format!("{p}.se"), dim, heads, ffn)?,
                ))
            } else {
                None
            };
            let merge = Conv1x1::declare(b, &format!("{p}.merge"), 2 * dim, dim, true, InitKind::Zeros)?;
            // merge([a ; b]) = (a + b) / 2 at initialization
            let mut w = Tensor::<T>::zeros(&[dim, 2 * dim]);
            let half = T::lit(0.5);
            for i in 0..dim {
                w.data_mut()[i * 2 * dim + i] = half;
                w.data_mut()[i * 2 * dim + dim + i] = half;
            }
            b.set(merge.weight_name(), w)?;
            Ok(Branch {
                rd: DominanceHead::declare(b, &format!("{p}.rd"), dim, heads, ffn)?,
                ce,
                se,
                merge,
            })
        };
        let vis = branch(b, Modality::Vis)?;
        let ir = branch(b, Modality::Ir)?;
        Ok(RelativeEnhancement {
            branches: [vis, ir],
            pair_softmax,
        })
    }

    pub fn dominance_head(&self, m: Modality) -> &DominanceHead {
        &self.branches[m.index()].rd
    }

    pub fn prompt(&self, m: Modality) -> Option<&RelativePrompt> {
        self.branches[m.index()].se.as_ref().map(|(p, _)| p)
    }

    pub fn cross(&self, m: Modality) -> Option<&CrossEnhance> {
        self.branches[m.index()].ce.as_ref()
    }

    pub fn self_enhance(&self, m: Modality) -> Option<&SelfEnhance> {
        self.branches[m.index()].se.as_ref().map(|(_, s)| s)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, f_vis: Var, f_ir: Var) -> Result<ReOutput> {
        ensure!(
            cx.tape.value(f_vis).dims() == cx.tape.value(f_ir).dims(),
            "relative enhancement: features {:?} and {:?} differ",
            cx.tape.value(f_vis).dims(),
            cx.tape.value(f_ir).dims()
        );
        let feats = [f_vis, f_ir];
        let rd = if self.pair_softmax {
            let lv = self.branches[0].rd.logits(cx, f_vis)?;
            let li = self.branches[1].rd.logits(cx, f_ir)?;
            let d = cx.tape.sub(lv, li)?;
            let nd = cx.tape.scale(d, -T::one());
            [cx.tape.sigmoid(d), cx.tape.sigmoid(nd)]
        } else {
            [
                self.branches[0].rd.compute_rd(cx, f_vis)?,
                self.branches[1].rd.compute_rd(cx, f_ir)?,
            ]
        };
        let mut enhanced = [f_vis, f_ir];
        for m in Modality::BOTH {
            let (i, o) = (m.index(), m.other().index());
            let br = &self.branches[i];
            let f = feats[i];
            let crossed = match &br.ce {
                Some(ce) => ce.forward(cx, f, feats[o], rd[o])?,
                None => f,
            };
            let refined = match &br.se {
                Some((rp, se)) => {
                    let prompt = rp.forward(cx, f, rd[o])?;
                    se.forward(cx, f, prompt)?
                }
                None => f,
            };
            let cat = cx.tape.concat(&[crossed, refined])?;
            enhanced[i] = br.merge.forward(cx, cat)?;
        }
        Ok(ReOutput {
            enhanced_vis: enhanced[0],
            enhanced_ir: enhanced[1],
            rd_vis: rd[0],
            rd_ir: rd[1],
        })
    }
}
