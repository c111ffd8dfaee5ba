//! Finite-difference cases for every parameterized network block and every loss.

use dreamif_core::backbone::{BackboneConfig, DecoderLevel, Downsample, Encoder, FuseBlock, Upsample};
use dreamif_core::imaging::{Image, RGB_TO_YCBCR};
use dreamif_core::losses::{color_term, grad_term, loss_graph, pixel_term, ssim_loss_term, LossWeights};
use dreamif_core::model::{Architecture, ModelConfig};
use dreamif_core::nn::{Builder, TransformerBlock};
use dreamif_core::params::ParamStore;
use dreamif_core::relative::{
    CrossEnhance, DominanceHead, PromptConfig, ReFlags, RelativeEnhancement, RelativePrompt, SelfEnhance,
};
use dreamif_core::tensor::Tensor;

use super::{check_module, rand_image, rand_tensor, rng, sobel_mag, GradReport};
use rand::Rng;

pub type Case = (&'static str, fn() -> GradReport);

pub const CASES: &[Case] = &[
    ("transformer_block", transformer_block),
    ("downsample", downsample),
    ("upsample", upsample),
    ("encoder", encoder),
    ("decoder_level", decoder_level),
    ("fuse_block", fuse_block),
    ("dominance_head", dominance_head),
    ("cross_enhance", cross_enhance),
    ("relative_prompt", relative_prompt),
    ("self_enhance", self_enhance),
    ("relative_enhancement", relative_enhancement),
    ("relative_enhancement_pair_softmax", relative_enhancement_pair_softmax),
    ("full_model", full_model),
    ("pixel_loss", pixel_loss),
    ("grad_loss", grad_loss),
    ("ssim_loss", ssim_loss),
    ("color_loss", color_loss),
    ("total_loss", total_loss),
];

const COORDS: usize = 24;

pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        base_dim: 4,
        level_blocks: [1, 1, 1, 1],
        fuse_blocks: 1,
        ..BackboneConfig::toy()
    }
}

fn randomized(b: Builder<f64>, seed: u64) -> ParamStore<f64> {
    let mut store = b.finish();
    store.randomize(seed, 0.3);
    store
}

pub fn transformer_block() -> GradReport {
    let mut b = Builder::new(0);
    let tb = TransformerBlock::declare(&mut b, "tb", 8, 2, 2.66).unwrap();
    let store = randomized(b, 1);
    let x = rand_tensor(&mut rng(2), &[8, 6, 6], -1.0, 1.0);
    check_module(&store, &[x], COORDS, |cx, v| tb.forward(cx, v[0]))
}

pub fn downsample() -> GradReport {
    let mut b = Builder::new(0);
    let d = Downsample::declare(&mut b, "down", 4).unwrap();
    let store = randomized(b, 3);
    let x = rand_tensor(&mut rng(4), &[4, 8, 8], -1.0, 1.0);
    check_module(&store, &[x], COORDS, |cx, v| d.forward(cx, v[0]))
}

pub fn upsample() -> GradReport {
    let mut b = Builder::new(0);
    let u = Upsample::declare(&mut b, "up", 8).unwrap();
    let store = randomized(b, 5);
    let x = rand_tensor(&mut rng(6), &[8, 4, 4], -1.0, 1.0);
    check_module(&store, &[x], COORDS, |cx, v| u.forward(cx, v[0]))
}

pub fn encoder() -> GradReport {
    let cfg = tiny_backbone();
    let mut b = Builder::new(0);
    let e = Encoder::declare(&mut b, "enc", &cfg).unwrap();
    let store = randomized(b, 7);
    let x = rand_tensor(&mut rng(8), &[3, 8, 8], 0.0, 1.0);
    check_module(&store, &[x], 8, |cx, v| {
        let p = e.forward(cx, v[0])?;
        // The deepest level depends on every encoder parameter.
        Ok(p.0[3])
    })
}

pub fn decoder_level() -> GradReport {
    let cfg = tiny_backbone();
    let mut b = Builder::new(0);
    let d = DecoderLevel::declare(&mut b, "dec", &cfg, 0).unwrap();
    let store = randomized(b, 9);
    let mut r = rng(10);
    let deep = rand_tensor(&mut r, &[8, 4, 4], -1.0, 1.0);
    let skip = rand_tensor(&mut r, &[4, 8, 8], -1.0, 1.0);
    check_module(&store, &[deep, skip], COORDS, |cx, v| d.forward(cx, v[0], v[1]))
}

pub fn fuse_block() -> GradReport {
    let cfg = tiny_backbone();
    let mut b = Builder::new(0);
    let f = FuseBlock::declare(&mut b, "fuse", &cfg).unwrap();
    let store = randomized(b, 11);
    let mut r = rng(12);
    let a = rand_tensor(&mut r, &[4, 8, 8], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[4, 8, 8], -1.0, 1.0);
    check_module(&store, &[a, c], COORDS, |cx, v| f.forward(cx, v[0], v[1]))
}

pub fn dominance_head() -> GradReport {
    let mut b = Builder::new(0);
    let h = DominanceHead::declare(&mut b, "rd", 8, 2, 2.66).unwrap();
    let store = randomized(b, 13);
    let x = rand_tensor(&mut rng(14), &[8, 4, 4], -1.0, 1.0);
    check_module(&store, &[x], COORDS, |cx, v| h.compute_rd(cx, v[0]))
}

pub fn cross_enhance() -> GradReport {
    let mut b = Builder::new(0);
    let ce = CrossEnhance::declare(&mut b, "ce", 8, 2, 2.66).unwrap();
    let store = randomized(b, 15);
    let mut r = rng(16);
    let fs = rand_tensor(&mut r, &[8, 4, 4], -1.0, 1.0);
    let fo = rand_tensor(&mut r, &[8, 4, 4], -1.0, 1.0);
    let rd = rand_tensor(&mut r, &[1, 4, 4], 0.1, 0.9);
    check_module(&store, &[fs, fo, rd], COORDS, |cx, v| ce.forward(cx, v[0], v[1], v[2]))
}

pub fn relative_prompt() -> GradReport {
    let mut b = Builder::new(0);
    let cfg = PromptConfig { n: 3, base_size: 3 };
    let rp = RelativePrompt::declare(&mut b, "prompt", 8, &cfg).unwrap();
    let store = randomized(b, 17);
    let mut r = rng(18);
    let f = rand_tensor(&mut r, &[8, 5, 5], -1.0, 1.0);
    let rd = rand_tensor(&mut r, &[1, 5, 5], 0.1, 0.9);
    check_module(&store, &[f, rd], COORDS, |cx, v| rp.forward(cx, v[0], v[1]))
}

pub fn self_enhance() -> GradReport {
    let mut b = Builder::new(0);
    let se = SelfEnhance::declare(&mut b, "se", 8, 2, 2.66).unwrap();
    let store = randomized(b, 19);
    let mut r = rng(20);
    let f = rand_tensor(&mut r, &[8, 4, 4], -1.0, 1.0);
    let p = rand_tensor(&mut r, &[8, 4, 4], -1.0, 1.0);
    check_module(&store, &[f, p], COORDS, |cx, v| se.forward(cx, v[0], v[1]))
}

fn enhancement(pair_softmax: bool, seed: u64) -> GradReport {
    let cfg = tiny_backbone();
    let prompt = PromptConfig { n: 3, base_size: 3 };
    let mut b = Builder::new(0);
    let re = RelativeEnhancement::declare(&mut b, "re", &cfg, 1, &prompt, ReFlags::default(), pair_softmax).unwrap();
    let store = randomized(b, seed);
    let mut r = rng(seed + 1);
    let fv = rand_tensor(&mut r, &[8, 4, 4], -1.0, 1.0);
    let fi = rand_tensor(&mut r, &[8, 4, 4], -1.0, 1.0);
    check_module(&store, &[fv, fi], 12, |cx, v| {
        let out = re.forward(cx, v[0], v[1])?;
        cx.tape.concat(&[out.enhanced_vis, out.enhanced_ir, out.rd_vis, out.rd_ir])
    })
}

pub fn relative_enhancement() -> GradReport {
    enhancement(false, 21)
}

pub fn relative_enhancement_pair_softmax() -> GradReport {
    enhancement(true, 23)
}

pub fn full_model() -> GradReport {
    let cfg = ModelConfig {
        backbone: tiny_backbone(),
        prompt: PromptConfig { n: 2, base_size: 2 },
        ..ModelConfig::toy()
    };
    let (arch, mut store) = Architecture::init::<f64>(&cfg).unwrap();
    store.randomize(25, 0.3);
    let mut r = rng(26);
    let vis = rand_tensor(&mut r, &[3, 8, 8], 0.0, 1.0);
    let ir = rand_tensor(&mut r, &[3, 8, 8], 0.0, 1.0);
    check_module(&store, &[vis, ir], 2, |cx, v| {
        let out = arch.forward(cx, v[0], v[1])?;
        let mut all = vec![out.fused];
        all.extend(out.rd.iter().filter(|(_, l, _)| *l == 1).map(|&(_, _, m)| m));
        cx.tape.concat(&all)
    })
}

/// `(f, v, i)` whose pixel, chroma and gradient-magnitude residuals all stay
/// at least 2e-2 away from the `|.|` kinks.
pub fn loss_inputs(size: usize, seed: u64) -> [Image; 3] {
    const MARGIN: f64 = 2e-2;
    let chroma = |rgb: [f64; 3]| [1, 2].map(|k| (0..3).map(|c| RGB_TO_YCBCR[k][c] * rgb[c]).sum::<f64>());
    for attempt in 0.. {
        let mut r = rng(seed * 1000 + attempt);
        let v = rand_image(&mut r, 3, size, size, 0.40, 0.45);
        let i = rand_image(&mut r, 3, size, size, 0.40, 0.45);
        let plane = size * size;
        let mut data = vec![0.0; 3 * plane];
        for p in 0..plane {
            let cv = chroma([0, 1, 2].map(|c| v.data()[c * plane + p]));
            let rgb = loop {
                // Values skip the band around max(v, i), which lies in [0.40, 0.45].
                let rgb = [(); 3].map(|_| {
                    let x = r.random_range(0.0..0.87);
                    if x >= 0.36 { x + 0.13 } else { x }
                });
                let cf = chroma(rgb);
                if (0..2).all(|k| (cf[k] - cv[k]).abs() >= MARGIN) {
                    break rgb;
                }
            };
            for c in 0..3 {
                data[c * plane + p] = rgb[c];
            }
        }
        let f = Image::new(3, size, size, data).unwrap();
        let (gf, gv, gi) = (sobel_mag(&f, 1.0), sobel_mag(&v, 1.0), sobel_mag(&i, 1.0));
        let grad_ok = gf
            .iter()
            .zip(gv.iter().zip(&gi))
            // Reflect padding cancels the corner responses of every image, so those do not depend on f.
            .all(|(&a, (&b, &c))| (a - b.max(c)).abs() >= MARGIN || a.max(b).max(c) < 1e-9);
        if grad_ok {
            return [f, v, i];
        }
    }
    unreachable!()
}

fn loss_case(size: usize, seed: u64, which: fn(&mut dreamif_core::params::Ctx<f64>, [dreamif_core::tape::Var; 3]) -> dreamif_core::Result<dreamif_core::tape::Var>) -> GradReport {
    let [f, v, i] = loss_inputs(size, seed);
    let store = ParamStore::new();
    let vt: Tensor<f64> = v.to_tensor();
    let it: Tensor<f64> = i.to_tensor();
    check_module(&store, &[f.to_tensor()], usize::MAX, move |cx, x| {
        let v = cx.tape.constant(vt.clone());
        let i = cx.tape.constant(it.clone());
        which(cx, [x[0], v, i])
    })
}

pub fn pixel_loss() -> GradReport {
    loss_case(8, 1, |cx, [f, v, i]| pixel_term(&mut cx.tape, f, v, i))
}

pub fn grad_loss() -> GradReport {
    loss_case(8, 2, |cx, [f, v, i]| grad_term(&mut cx.tape, f, v, i))
}

/// The SSIM window is 11x11, so this case uses 12x12 images.
pub fn ssim_loss() -> GradReport {
    loss_case(12, 3, |cx, [f, v, i]| ssim_loss_term(&mut cx.tape, f, v, i))
}

pub fn color_loss() -> GradReport {
    loss_case(8, 4, |cx, [f, v, _]| color_term(&mut cx.tape, f, v))
}

pub fn total_loss() -> GradReport {
    loss_case(12, 5, |cx, [f, v, i]| {
        let w = LossWeights {
            pixel: 1.0,
            grad: 0.5,
            ssim: 2.0,
            color: 1.5,
        };
        Ok(loss_graph(&mut cx.tape, f, v, i, &w)?.total)
    })
}
