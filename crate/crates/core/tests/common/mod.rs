//! Shared helpers for the integration tests.
#![allow(dead_code)]

pub mod gradsuite;

use dreamif_core::dataio::{synth_pairs, ImagePair};
use dreamif_core::imaging::Image;
use dreamif_core::params::{Ctx, ParamStore};
use dreamif_core::tape::Var;
use dreamif_core::tensor::Tensor;
use dreamif_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rand_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Image {
    Image::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Result of one finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over checked coordinates.
    pub rel_err: f64,
    pub coords: usize,
    pub analytic_norm: f64,
}

/// `mean(build(...) * r)`; a fresh random `r` is drawn when none is given.
fn objective<'a, F>(
    build: &F,
    store: &'a ParamStore<f64>,
    inputs: &[Tensor<f64>],
    r: Option<&Tensor<f64>>,
) -> (Ctx<'a, f64>, Vec<Var>, Var, Tensor<f64>)
where
    F: Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
{
    let mut cx = Ctx::train(store);
    let vars: Vec<Var> = inputs.iter().map(|t| cx.tape.leaf(t.clone())).collect();
    let out = build(&mut cx, &vars).expect("forward");
    let dims = cx.tape.value(out).dims().to_vec();
    let r = match r {
        Some(r) => r.clone(),
        None => rand_tensor(&mut rng(4242), &dims, -1.0, 1.0),
    };
    let rv = cx.tape.constant(r.clone());
    let prod = cx.tape.mul(out, rv).unwrap();
    let root = cx.tape.mean(prod);
    (cx, vars, root, r)
}

/// Compares reverse-mode gradients of `mean(build(...) * r)` for a fixed random `r`
/// against central differences, for every differentiable input tensor and
/// every parameter of `store`. At most `max_coords` evenly spaced
/// coordinates are probed per tensor.
pub fn check_module<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], max_coords: usize, build: F) -> GradReport
where
    F: Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
{
    let (cx, vars, root, r) = objective(&build, store, inputs, None);
    let grads = cx.tape.backward(root);
    let pgrads = cx.param_grads(&grads);
    let value = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| {
        let (cx, _, root, _) = objective(&build, store, inputs, Some(&r));
        cx.tape.value(root).data()[0]
    };

    let (mut diff2, mut an2, mut nu2, mut coords) = (0.0, 0.0, 0.0, 0);
    let mut tally = |a: f64, n: f64| {
        diff2 += (a - n).powi(2);
        an2 += a * a;
        nu2 += n * n;
        coords += 1;
    };
    let probe = |len: usize| {
        let stride = len.div_ceil(max_coords).max(1);
        (0..len).step_by(stride).collect::<Vec<_>>()
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        for j in probe(input.len()) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let num = (value(store, &plus) - value(store, &minus)) / (2.0 * FD_STEP);
            tally(analytic.data()[j], num);
        }
    }
    for (name, g) in &pgrads {
        for j in probe(g.len()) {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= FD_STEP;
            let num = (value(&plus, inputs) - value(&minus, inputs)) / (2.0 * FD_STEP);
            tally(g.data()[j], num);
        }
    }
    let scale = an2.sqrt().max(nu2.sqrt()).max(1e-300);
    GradReport {
        rel_err: diff2.sqrt() / scale,
        coords,
        analytic_norm: an2.sqrt(),
    }
}

/// The eight 64x64 toy pairs used by the smoke tests.
pub fn toy_pairs(n: usize, size: usize, seed: u64) -> Vec<ImagePair> {
    synth_pairs(n, size, seed).unwrap().into_iter().map(|s| s.pair).collect()
}

/// Brute-force reflect-padded 3x3 correlation, independent of the library kernels.
pub fn conv3x3_reflect(plane: &[f64], h: usize, w: usize, k: [[f64; 3]; 3]) -> Vec<f64> {
    let refl = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * (n - 1) - i as usize
        } else {
            i as usize
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (dy, row) in k.iter().enumerate() {
                for (dx, &kv) in row.iter().enumerate() {
                    let yy = refl(y as isize + dy as isize - 1, h);
                    let xx = refl(x as isize + dx as isize - 1, w);
                    s += kv * plane[yy * w + xx];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Luma by the textbook BT.601 weights, written out independently.
pub fn luma(img: &Image) -> Vec<f64> {
    let (c, h, w) = img.dims();
    (0..h * w)
        .map(|p| {
            if c == 1 {
                img.data()[p]
            } else {
                0.299 * img.plane(0)[p] + 0.587 * img.plane(1)[p] + 0.114 * img.plane(2)[p]
            }
        })
        .collect()
}

/// Sobel magnitude of the luma by brute-force convolution.
pub fn sobel_mag(img: &Image, scale: f64) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let l: Vec<f64> = luma(img).iter().map(|v| v * scale).collect();
    let gx = conv3x3_reflect(&l, h, w, SOBEL_X);
    let gy = conv3x3_reflect(&l, h, w, SOBEL_Y);
    gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}
