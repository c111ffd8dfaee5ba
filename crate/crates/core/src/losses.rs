//! The four-term fusion objective: pixel, gradient, SSIM and color.
//!
//! Every term is built as a tape graph so the trainer can differentiate it;
//! the image-level functions evaluate the same graphs in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imaging::{check_same_shape, Image, LUMA, RGB_TO_YCBCR};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Stabilizer inside the Sobel magnitude so its derivative stays finite on flat regions.
pub const GRAD_EPS: f64 = 1e-8;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pixel: f64,
    pub grad: f64,
    pub ssim: f64,
    pub color: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pixel: 1.0,
            grad: 1.0,
            ssim: 1.0,
            color: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub grad: f64,
    pub ssim: f64,
    pub color: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills in `total` as the weighted sum of the four terms.
    pub fn from_terms(pixel: f64, grad: f64, ssim: f64, color: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            pixel,
            grad,
            ssim,
            color,
            total: w.pixel * pixel + w.grad * grad + w.ssim * ssim + w.color * color,
        }
    }

    /// Termwise mean; `total` is recomputed from the averaged terms.
    pub fn mean(items: &[LossBreakdown], w: &LossWeights) -> Self {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::from_terms(avg(|b| b.pixel), avg(|b| b.grad), avg(|b| b.ssim), avg(|b| b.color), w)
    }

    pub fn is_finite(&self) -> bool {
        [self.pixel, self.grad, self.ssim, self.color, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Scalar graph nodes for each term of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub pixel: Var,
    pub grad: Var,
    pub ssim: Var,
    pub color: Var,
    pub total: Var,
}

impl LossGraph {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>, w: &LossWeights) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0].to_f64().unwrap_or(f64::NAN);
        LossBreakdown::from_terms(v(self.pixel), v(self.grad), v(self.ssim), v(self.color), w)
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn luma<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.channel_mix(x, &[LUMA.to_vec()], &[0.0])
}

fn sobel_magnitude<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let y = luma(tape, x)?;
    let g = tape.sobel(y)?;
    let sq = tape.square(g);
    let gx = tape.slice_channels(sq, 0, 1)?;
    let gy = tape.slice_channels(sq, 1, 1)?;
    let s = tape.add(gx, gy)?;
    let s = tape.add_scalar(s, T::lit(GRAD_EPS));
    Ok(tape.sqrt(s))
}

fn l1_mean<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

fn elementwise_max<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (x, y) = (tape.value(a), tape.value(b));
    ensure!(x.dims() == y.dims(), "max of {:?} and {:?}", x.dims(), y.dims());
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &q)| if q > p { q } else { p })
        .collect();
    let t = Tensor::from_vec(x.dims(), data)?;
    Ok(tape.constant(t))
}

/// `mean |f - max(v, i)|` over all elements. `v` and `i` must not require gradients.
pub fn pixel_term<T: Real>(tape: &mut Tape<T>, f: Var, v: Var, i: Var) -> Result<Var> {
    let m = elementwise_max(tape, v, i)?;
    l1_mean(tape, f, m)
}

/// `mean | |grad Y(f)| - max(|grad Y(v)|, |grad Y(i)|) |` with reflect-padded Sobel.
pub fn grad_term<T: Real>(tape: &mut Tape<T>, f: Var, v: Var, i: Var) -> Result<Var> {
    let gf = sobel_magnitude(tape, f)?;
    let gv = sobel_magnitude(tape, v)?;
    let gi = sobel_magnitude(tape, i)?;
    let m = elementwise_max(tape, gv, gi)?;
    l1_mean(tape, gf, m)
}

/// Mean SSIM of the lumas of `a` and `b`.
pub fn ssim_term<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (_, h, w) = tape.value(a).chw()?;
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
    );
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let x = luma(tape, a)?;
    let y = luma(tape, b)?;
    let filt = |tape: &mut Tape<T>, v: Var| tape.filter_valid(v, &k);
    let mx = filt(tape, x)?;
    let my = filt(tape, y)?;
    let xx = tape.square(x);
    let yy = tape.square(y);
    let xy = tape.mul(x, y)?;
    let exx = filt(tape, xx)?;
    let eyy = filt(tape, yy)?;
    let exy = filt(tape, xy)?;
    let mx2 = tape.square(mx);
    let my2 = tape.square(my);
    let mxy = tape.mul(mx, my)?;
    let sxx = tape.sub(exx, mx2)?;
    let syy = tape.sub(eyy, my2)?;
    let sxy = tape.sub(exy, mxy)?;

    let two = T::lit(2.0);
    let n1 = tape.scale(mxy, two);
    let n1 = tape.add_scalar(n1, T::lit(SSIM_C1));
    let n2 = tape.scale(sxy, two);
    let n2 = tape.add_scalar(n2, T::lit(SSIM_C2));
    let d1 = tape.add(mx2, my2)?;
    let d1 = tape.add_scalar(d1, T::lit(SSIM_C1));
    let d2 = tape.add(sxx, syy)?;
    let d2 = tape.add_scalar(d2, T::lit(SSIM_C2));
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// `(1 - SSIM(f, v)) + (1 - SSIM(f, i))`.
pub fn ssim_loss_term<T: Real>(tape: &mut Tape<T>, f: Var, v: Var, i: Var) -> Result<Var> {
    let sv = ssim_term(tape, f, v)?;
    let si = ssim_term(tape, f, i)?;
    let s = tape.add(sv, si)?;
    let s = tape.scale(s, -T::one());
    Ok(tape.add_scalar(s, T::lit(2.0)))
}

/// Mean absolute difference of the Cb and Cr planes.
pub fn color_term<T: Real>(tape: &mut Tape<T>, f: Var, v: Var) -> Result<Var> {
    let chroma = [RGB_TO_YCBCR[1].to_vec(), RGB_TO_YCBCR[2].to_vec()];
    let cf = tape.channel_mix(f, &chroma, &[0.5, 0.5])?;
    let cv = tape.channel_mix(v, &chroma, &[0.5, 0.5])?;
    l1_mean(tape, cf, cv)
}

/// Builds all four terms and their weighted sum for one `[3,H,W]` sample.
pub fn loss_graph<T: Real>(tape: &mut Tape<T>, f: Var, v: Var, i: Var, w: &LossWeights) -> Result<LossGraph> {
    let pixel = pixel_term(tape, f, v, i)?;
    let grad = grad_term(tape, f, v, i)?;
    let ssim = ssim_loss_term(tape, f, v, i)?;
    let color = color_term(tape, f, v)?;
    let mut total = tape.scale(pixel, T::lit(w.pixel));
    for (term, weight) in [(grad, w.grad), (ssim, w.ssim), (color, w.color)] {
        let s = tape.scale(term, T::lit(weight));
        total = tape.add(total, s)?;
    }
    Ok(LossGraph {
        pixel,
        grad,
        ssim,
        color,
        total,
    })
}

fn eval<const N: usize>(
    images: [&Image; N],
    what: &str,
    build: impl FnOnce(&mut Tape<f64>, [Var; N]) -> Result<Var>,
) -> Result<f64> {
    check_same_shape(&images, what)?;
    let mut tape = Tape::new();
    let vars = images.map(|img| tape.constant(img.to_rgb().to_tensor::<f64>()));
    let out = build(&mut tape, vars)?;
    Ok(tape.value(out).data()[0])
}

pub fn pixel_loss(f: &Image, v: &Image, i: &Image) -> Result<f64> {
    eval([f, v, i], "pixel_loss", |t, [f, v, i]| pixel_term(t, f, v, i))
}

pub fn grad_loss(f: &Image, v: &Image, i: &Image) -> Result<f64> {
    eval([f, v, i], "grad_loss", |t, [f, v, i]| grad_term(t, f, v, i))
}

pub fn ssim_index(a: &Image, b: &Image) -> Result<f64> {
    eval([a, b], "ssim_index", |t, [a, b]| ssim_term(t, a, b))
}

pub fn ssim_loss(f: &Image, v: &Image, i: &Image) -> Result<f64> {
    eval([f, v, i], "ssim_loss", |t, [f, v, i]| ssim_loss_term(t, f, v, i))
}

pub fn color_loss(f: &Image, v: &Image) -> Result<f64> {
    eval([f, v], "color_loss", |t, [f, v]| color_term(t, f, v))
}

/// All four terms with unit weights.
pub fn total_loss(f: &Image, v: &Image, i: &Image) -> Result<LossBreakdown> {
    weighted_loss(f, v, i, &LossWeights::default())
}

pub fn weighted_loss(f: &Image, v: &Image, i: &Image, w: &LossWeights) -> Result<LossBreakdown> {
    check_same_shape(&[f, v, i], "total_loss")?;
    let mut tape = Tape::new();
    let [f, v, i] = [f, v, i].map(|img| tape.constant(img.to_rgb().to_tensor::<f64>()));
    Ok(loss_graph(&mut tape, f, v, i, w)?.breakdown(&tape, w))
}
