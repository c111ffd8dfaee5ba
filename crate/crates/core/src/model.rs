//! The full dual-branch fusion network.
//!
//! Each modality has its own encoder and decoder. Starting from the deepest
//! level, every decoder level is followed by a relative enhancement block that
//! exchanges information between the two streams; the two full-resolution
//! outputs are then rendered into one image by the fuse block.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, DecoderLevel, Encoder, FuseBlock, LEVELS};
use crate::error::{ensure, Result};
use crate::imaging::{check_same_shape, Image};
use crate::nn::Builder;
use crate::params::{Ctx, ParamStore};
use crate::relative::{Modality, PromptConfig, ReFlags, RelativeDominanceMap, RelativeEnhancement};
use crate::tape::Var;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
    pub use_ce: bool,
    pub use_se: bool,
    /// Dominance maps as a softmax over the modality pair instead of two
    /// independent sigmoids.
    #[serde(default)]
    pub pair_softmax: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// C=16, blocks [1,1,1,2], 5 prompt components at 8x8.
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            prompt: PromptConfig { n: 5, base_size: 8 },
            use_ce: true,
            use_se: true,
            pair_softmax: false,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            backbone: BackboneConfig::full(),
            prompt: PromptConfig::default(),
            ..Self::toy()
        }
    }

    pub fn flags(&self) -> ReFlags {
        ReFlags {
            use_ce: self.use_ce,
            use_se: self.use_se,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        ensure!(self.prompt.n >= 1, "prompt.n must be at least 1");
        ensure!(self.prompt.base_size >= 1, "prompt.base_size must be at least 1");
        Ok(())
    }
}

/// Layer structure of a model; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Architecture {
    encoders: [Encoder; 2],
    /// Per modality, decoder levels 1..=3 (0-based index).
    decoders: [Vec<DecoderLevel>; 2],
    /// One block per level, 0-based.
    enhance: Vec<RelativeEnhancement>,
    fuse: FuseBlock,
}

/// Graph handles produced by [`Architecture::forward`].
#[derive(Debug, Clone)]
pub struct GraphOutput {
    /// `[3,H,W]` in `(0,1)`.
    pub fused: Var,
    /// `(modality, 1-based level, [1,h,w] map)`, level 1 first, vis before ir.
    pub rd: Vec<(Modality, usize, Var)>,
}

impl Architecture {
    pub fn declare<T: Real>(b: &mut Builder<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let bb = &cfg.backbone;
        let encoders = [
            Encoder::declare(b, "vis.encoder", bb)?,
            Encoder::declare(b, "ir.encoder", bb)?,
        ];
        let decoder = |b: &mut Builder<T>, m: Modality| -> Result<Vec<DecoderLevel>> {
            (0..LEVELS - 1)
                .map(|l| DecoderLevel::declare(b, &format!("{}.decoder.level{}", m.tag(), l + 1), bb, l))
                .collect()
        };
        let decoders = [decoder(b, Modality::Vis)?, decoder(b, Modality::Ir)?];
        let enhance = (0..LEVELS)
            .map(|l| {
                RelativeEnhancement::declare(
                    b,
                    &format!("enhance.level{}", l + 1),
                    bb,
                    l,
                    &cfg.prompt,
                    cfg.flags(),
                    cfg.pair_softmax,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = FuseBlock::declare(b, "fuse", bb)?;
        Ok(Architecture {
            encoders,
            decoders,
            enhance,
            fuse,
        })
    }

    /// Builds the layer structure together with freshly initialized parameters.
    pub fn init<T: Real>(cfg: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        let mut b = Builder::new(cfg.seed);
        let arch = Self::declare(&mut b, cfg)?;
        Ok((arch, b.finish()))
    }

    pub fn enhancement(&self, level: usize) -> &RelativeEnhancement {
        &self.enhance[level]
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, vis: Var, ir: Var) -> Result<GraphOutput> {
        ensure!(
            cx.tape.value(vis).dims() == cx.tape.value(ir).dims(),
            "visible {:?} and infrared {:?} inputs differ in shape",
            cx.tape.value(vis).dims(),
            cx.tape.value(ir).dims()
        );
        let skips = [
            self.encoders[0].forward(cx, vis)?.0,
            self.encoders[1].forward(cx, ir)?.0,
        ];
        let mut rd = Vec::with_capacity(2 * LEVELS);
        let mut feats = [skips[0][LEVELS - 1], skips[1][LEVELS - 1]];
        for l in (0..LEVELS).rev() {
            if l + 1 < LEVELS {
                for m in 0..2 {
                    feats[m] = self.decoders[m][l].forward(cx, feats[m], skips[m][l])?;
                }
            }
            let out = self.enhance[l].forward(cx, feats[0], feats[1])?;
            feats = [out.enhanced_vis, out.enhanced_ir];
            rd.push((Modality::Vis, l + 1, out.rd_vis));
            rd.push((Modality::Ir, l + 1, out.rd_ir));
        }
        rd.sort_by_key(|&(m, l, _)| (l, m == Modality::Ir));
        let fused = self.fuse.forward(cx, feats[0], feats[1])?;
        Ok(GraphOutput { fused, rd })
    }
}

/// Result of one inference pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub fused: Image,
    /// Eight maps, level 1 first, visible before infrared within a level.
    pub rd_maps: Vec<RelativeDominanceMap>,
}

impl ForwardResult {
    pub fn rd(&self, modality: Modality, level: usize) -> Option<&RelativeDominanceMap> {
        self.rd_maps
            .iter()
            .find(|m| m.modality == modality && m.level == level)
    }
}

/// A constructed network with single-precision parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    arch: Architecture,
    pub params: ParamStore<f32>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (arch, params) = Architecture::init(&config)?;
        Ok(Model {
            config,
            arch,
            params,
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn forward(&self, vis: &Image, ir: &Image) -> Result<ForwardResult> {
        let (vis, ir) = (vis.to_rgb(), ir.to_rgb());
        check_same_shape(&[&vis, &ir], "forward")?;
        let mut cx = Ctx::infer(&self.params);
        let v = cx.tape.constant(vis.to_tensor());
        let i = cx.tape.constant(ir.to_tensor());
        let out = self.arch.forward(&mut cx, v, i)?;
        let fused = Image::from_tensor(cx.tape.value(out.fused))?;
        let rd_maps = out
            .rd
            .iter()
            .map(|&(m, l, var)| RelativeDominanceMap::from_tensor(m, l, cx.tape.value(var)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardResult { fused, rd_maps })
    }
}

/// Configuration plus parameter counts, as reported by `describe`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: ModelConfig,
    pub num_params: usize,
    pub num_tensors: usize,
}

pub fn describe(config: &ModelConfig) -> Result<ModelSummary> {
    let (_, params) = Architecture::init::<f32>(config)?;
    Ok(ModelSummary {
        config: config.clone(),
        num_params: params.num_scalars(),
        num_tensors: params.len(),
    })
}

impl Model {
    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            config: self.config.clone(),
            num_params: self.params.num_scalars(),
            num_tensors: self.params.len(),
        }
    }
}
