//! Fusion quality metrics: EI, AG, PSNR, Q^AB/F and VIFF.
//!
//! All metrics work on BT.601 luma. EI, AG, Q^AB/F and VIFF use the 0-255
//! scale; PSNR uses the normalized `[0, 1]` scale.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::{check_same_shape, sobel_plane, GradientField, Image};
use crate::losses::gaussian_kernel;
use crate::tape::kernels;

pub const PSNR_CAP: f64 = 100.0;

/// Edge-preservation sigmoid constants (strength, orientation).
pub const QABF_GAMMA_G: f64 = 0.9994;
pub const QABF_KAPPA_G: f64 = -15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
pub const QABF_GAMMA_A: f64 = 0.9879;
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

pub const VIFF_SCALES: usize = 4;
pub const VIFF_NOISE_VAR: f64 = 2.0;
pub const VIFF_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub ei: f64,
    pub ag: f64,
    pub psnr: f64,
    pub qabf: f64,
    pub viff: f64,
}

impl MetricReport {
    /// Fieldwise mean; the zero report for an empty slice.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        if reports.is_empty() {
            return MetricReport::default();
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            ei: avg(|r| r.ei),
            ag: avg(|r| r.ag),
            psnr: avg(|r| r.psnr),
            qabf: avg(|r| r.qabf),
            viff: avg(|r| r.viff),
        }
    }
}

fn luma255(img: &Image) -> Vec<f64> {
    img.luma().into_iter().map(|v| v * 255.0).collect()
}

fn gradients(img: &Image) -> Result<GradientField> {
    sobel_plane(&luma255(img), img.height(), img.width())
}

/// Mean Sobel magnitude.
pub fn metric_ei(f: &Image) -> Result<f64> {
    let mag = gradients(f)?.magnitude();
    Ok(mag.iter().sum::<f64>() / mag.len() as f64)
}

/// Mean of `sqrt((dx^2 + dy^2) / 2)` with forward differences over the
/// `(H-1) x (W-1)` interior.
pub fn metric_ag(f: &Image) -> Result<f64> {
    let (h, w) = (f.height(), f.width());
    if h < 2 || w < 2 {
        return Err(invalid!("average gradient needs at least 2x2 pixels, got {h}x{w}"));
    }
    let l = luma255(f);
    let mut sum = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let dx = l[y * w + x + 1] - l[y * w + x];
            let dy = l[(y + 1) * w + x] - l[y * w + x];
            sum += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(sum / ((h - 1) * (w - 1)) as f64)
}

fn psnr_single(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Mean of the two per-source PSNRs, each capped at 100 dB.
pub fn metric_psnr(f: &Image, v: &Image, i: &Image) -> Result<f64> {
    check_same_shape(&[f, v, i], "psnr")?;
    let lf = f.luma();
    Ok(0.5 * (psnr_single(&lf, &v.luma()) + psnr_single(&lf, &i.luma())))
}

fn orientation(gx: f64, gy: f64) -> f64 {
    if gx == 0.0 {
        FRAC_PI_2
    } else {
        (gy / gx).atan()
    }
}

fn logistic(gamma: f64, kappa: f64, sigma: f64, x: f64) -> f64 {
    gamma / (1.0 + (kappa * (x - sigma)).exp())
}

/// Edge preservation of `src` in `fused` at one pixel, in `[0, 1]`.
fn preservation(gs: f64, as_: f64, gf: f64, af: f64) -> f64 {
    let g = if gs == gf {
        1.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let d = (as_ - af).abs() % PI;
    let a = 1.0 - d.min(PI - d) / FRAC_PI_2;
    // Normalizing by the value at perfect preservation makes f = a = b score
    // exactly 1; the raw constants saturate at about 0.975.
    let qg = logistic(QABF_GAMMA_G, QABF_KAPPA_G, QABF_SIGMA_G, g)
        / logistic(QABF_GAMMA_G, QABF_KAPPA_G, QABF_SIGMA_G, 1.0);
    let qa = logistic(QABF_GAMMA_A, QABF_KAPPA_A, QABF_SIGMA_A, a)
        / logistic(QABF_GAMMA_A, QABF_KAPPA_A, QABF_SIGMA_A, 1.0);
    (qg * qa).clamp(0.0, 1.0)
}

/// Gradient-based edge preservation index with source-strength weights.
pub fn metric_qabf(f: &Image, a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(&[f, a, b], "qabf")?;
    let [gf, ga, gb] = [gradients(f)?, gradients(a)?, gradients(b)?];
    let [mf, ma, mb] = [gf.magnitude(), ga.magnitude(), gb.magnitude()];
    let (mut num, mut den) = (0.0, 0.0);
    for p in 0..mf.len() {
        let af = orientation(gf.gx[p], gf.gy[p]);
        let qa = preservation(ma[p], orientation(ga.gx[p], ga.gy[p]), mf[p], af);
        let qb = preservation(mb[p], orientation(gb.gx[p], gb.gy[p]), mf[p], af);
        num += qa * ma[p] + qb * mb[p];
        den += ma[p] + mb[p];
    }
    Ok(if den == 0.0 { 1.0 } else { (num / den).clamp(0.0, 1.0) })
}

struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        Plane {
            h: self.h + 1 - n,
            w: self.w + 1 - n,
            data: kernels::filter_valid(&self.data, k, 1, self.h, self.w),
        }
    }

    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn decimate(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.data[2 * y * self.w + 2 * x])
            .collect();
        Plane { h, w, data }
    }
}

/// Pixel-domain visual information fidelity of `dist` relative to `reference`,
/// one ratio per usable scale.
fn vif_scales(reference: &[f64], dist: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut r = Plane {
        h,
        w,
        data: reference.to_vec(),
    };
    let mut d = Plane {
        h,
        w,
        data: dist.to_vec(),
    };
    let mut ratios = Vec::with_capacity(VIFF_SCALES);
    for s in 1..=VIFF_SCALES {
        let n = (1usize << (VIFF_SCALES - s + 1)) + 1;
        let k = gaussian_kernel(n, n as f64 / 5.0);
        if s > 1 {
            if r.h < n || r.w < n {
                break;
            }
            r = r.filter(&k).decimate();
            d = d.filter(&k).decimate();
        }
        if r.h < n || r.w < n {
            break;
        }
        let mu1 = r.filter(&k);
        let mu2 = d.filter(&k);
        let e11 = r.map2(&r, |a, b| a * b).filter(&k);
        let e22 = d.map2(&d, |a, b| a * b).filter(&k);
        let e12 = r.map2(&d, |a, b| a * b).filter(&k);
        let (mut num, mut den) = (0.0, 0.0);
        for p in 0..mu1.data.len() {
            let (m1, m2) = (mu1.data[p], mu2.data[p]);
            let mut s1 = (e11.data[p] - m1 * m1).max(0.0);
            let s2 = (e22.data[p] - m2 * m2).max(0.0);
            let s12 = e12.data[p] - m1 * m2;
            let mut g = s12 / (s1 + VIFF_EPS);
            let mut sv = s2 - g * s12;
            if s1 < VIFF_EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < VIFF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            let sv = sv.max(VIFF_EPS);
            num += (1.0 + g * g * s1 / (sv + VIFF_NOISE_VAR)).log10();
            den += (1.0 + s1 / VIFF_NOISE_VAR).log10();
        }
        // A flat reference carries no information to lose.
        ratios.push(if den == 0.0 { 1.0 } else { num / den });
    }
    ratios
}

/// Multi-scale VIF of each source against the fused image, scale ratios
/// averaged uniformly, then averaged over the two sources. Scales whose
/// window no longer fits are skipped; at least the finest must fit.
pub fn metric_viff(f: &Image, a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(&[f, a, b], "viff")?;
    let (h, w) = (f.height(), f.width());
    let lf = luma255(f);
    let mut total = 0.0;
    for src in [a, b] {
        let ratios = vif_scales(&luma255(src), &lf, h, w);
        if ratios.is_empty() {
            let n = (1usize << VIFF_SCALES) + 1;
            return Err(invalid!("viff needs at least {n}x{n} pixels, got {h}x{w}"));
        }
        total += ratios.iter().sum::<f64>() / ratios.len() as f64;
    }
    Ok(total / 2.0)
}

pub fn evaluate_pair(f: &Image, v: &Image, i: &Image) -> Result<MetricReport> {
    check_same_shape(&[f, v, i], "evaluate_pair")?;
    Ok(MetricReport {
        ei: metric_ei(f)?,
        ag: metric_ag(f)?,
        psnr: metric_psnr(f, v, i)?,
        qabf: metric_qabf(f, v, i)?,
        viff: metric_viff(f, v, i)?,
    })
}
