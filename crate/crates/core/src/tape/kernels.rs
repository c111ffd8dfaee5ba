//! Forward and adjoint kernels for the spatial operators on `[C, H, W]` data.

use crate::tensor::{dot, matmul, Real};

/// Zero-padded 3x3 patches: `cols[(ci*9 + ky*3 + kx), y*w + x] = x[ci, y+ky-1, x+kx-1]`.
pub(crate) fn im2col3x3<T: Real>(src: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let p = h * w;
    let mut cols = vec![T::zero(); c * 9 * p];
    for ci in 0..c {
        let plane = &src[ci * p..(ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let (x0, x1) = valid_range(w, kx);
                    let dst = &mut row[y * w + x0..y * w + x1];
                    let s = &plane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                    dst.copy_from_slice(s);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: scatters column gradients back onto the image.
pub(crate) fn col2im3x3<T: Real>(cols: &[T], dst: &mut [T], c: usize, h: usize, w: usize) {
    let p = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * p..(ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let (x0, x1) = valid_range(w, kx);
                    let s = &row[y * w + x0..y * w + x1];
                    let d = &mut plane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Output columns `x` whose tap `x + kx - 1` lands inside `[0, w)`.
#[inline]
fn valid_range(w: usize, kx: usize) -> (usize, usize) {
    match kx {
        0 => (1, w),
        1 => (0, w),
        _ => (0, w - 1),
    }
}

/// Copies a plane into a zero border of width 1, row stride `w + 2`, with two
/// trailing zeros so every 3x3 tap can run over the whole padded-stride range.
fn pad_plane<T: Real>(plane: &[T], h: usize, w: usize, buf: &mut Vec<T>) {
    let w2 = w + 2;
    buf.clear();
    buf.resize((h + 2) * w2 + 2, T::zero());
    for y in 0..h {
        buf[(y + 1) * w2 + 1..(y + 1) * w2 + 1 + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
    }
}

/// `out[y*(w+2) + x] = sum k[ky][kx] * padded[(y+ky)*(w+2) + x+kx]` for all
/// `x < w + 2`; the two extra columns per row are scratch.
fn taps_padded<T: Real>(padded: &[T], k: &[T], h: usize, w: usize, out: &mut [T]) {
    let w2 = w + 2;
    let len = h * w2;
    out[..len].iter_mut().for_each(|v| *v = T::zero());
    for ky in 0..3 {
        for kx in 0..3 {
            let kv = k[ky * 3 + kx];
            let src = &padded[ky * w2 + kx..ky * w2 + kx + len];
            for (o, &s) in out[..len].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
}

/// Depthwise 3x3 convolution, zero padding, weights `[C, 3, 3]`.
pub(crate) fn dwconv3x3<T: Real>(src: &[T], wt: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let p = h * w;
    let w2 = w + 2;
    let mut out = vec![T::zero(); c * p];
    let mut padded = Vec::new();
    let mut scratch = vec![T::zero(); h * w2];
    for ci in 0..c {
        pad_plane(&src[ci * p..(ci + 1) * p], h, w, &mut padded);
        taps_padded(&padded, &wt[ci * 9..ci * 9 + 9], h, w, &mut scratch);
        for y in 0..h {
            out[ci * p + y * w..ci * p + (y + 1) * w].copy_from_slice(&scratch[y * w2..y * w2 + w]);
        }
    }
    out
}

/// Gradients of [`dwconv3x3`] with respect to input and weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dwconv3x3_backward<T: Real>(
    src: &[T],
    wt: &[T],
    dout: &[T],
    c: usize,
    h: usize,
    w: usize,
    mut dsrc: Option<&mut [T]>,
    mut dwt: Option<&mut [T]>,
) {
    let p = h * w;
    let w2 = w + 2;
    let mut padded = Vec::new();
    let mut scratch = vec![T::zero(); h * w2];
    // dout laid out with the padded row stride, scratch columns zero
    let mut gw = vec![T::zero(); h * w2];
    for ci in 0..c {
        let g = &dout[ci * p..(ci + 1) * p];
        if let Some(dsrc) = dsrc.as_deref_mut() {
            // correlation of the zero-padded gradient with the flipped kernel
            let k = &wt[ci * 9..ci * 9 + 9];
            let flipped: Vec<T> = (0..9).map(|i| k[8 - i]).collect();
            pad_plane(g, h, w, &mut padded);
            taps_padded(&padded, &flipped, h, w, &mut scratch);
            let d = &mut dsrc[ci * p..(ci + 1) * p];
            for y in 0..h {
                for (a, &b) in d[y * w..(y + 1) * w].iter_mut().zip(&scratch[y * w2..y * w2 + w]) {
                    *a += b;
                }
            }
        }
        if let Some(dwt) = dwt.as_deref_mut() {
            pad_plane(&src[ci * p..(ci + 1) * p], h, w, &mut padded);
            for y in 0..h {
                gw[y * w2..y * w2 + w].copy_from_slice(&g[y * w..(y + 1) * w]);
            }
            let len = h * w2;
            for ky in 0..3 {
                for kx in 0..3 {
                    let off = ky * w2 + kx;
                    dwt[ci * 9 + ky * 3 + kx] += dot(&gw, &padded[off..off + len]);
                }
            }
        }
    }
}

/// Reflect (mirror without edge repeat) index into `[0, n)`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

pub(crate) const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub(crate) const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel responses with reflect padding. Returns `[gx planes..., gy planes...]`.
///
/// Written as sums of differences so that constant regions give exact zeros.
pub(crate) fn sobel<T: Real>(src: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let p = h * w;
    let two = T::lit(2.0);
    let mut out = vec![T::zero(); 2 * c * p];
    for ci in 0..c {
        let plane = &src[ci * p..(ci + 1) * p];
        for y in 0..h {
            let r0 = reflect(y as isize - 1, h) * w;
            let r1 = y * w;
            let r2 = reflect(y as isize + 1, h) * w;
            for x in 0..w {
                let c0 = reflect(x as isize - 1, w);
                let c2 = reflect(x as isize + 1, w);
                let at = |r: usize, col: usize| plane[r + col];
                let gx = (at(r0, c2) - at(r0, c0)) + two * (at(r1, c2) - at(r1, c0)) + (at(r2, c2) - at(r2, c0));
                let gy = (at(r2, c0) - at(r0, c0)) + two * (at(r2, x) - at(r0, x)) + (at(r2, c2) - at(r0, c2));
                out[ci * p + y * w + x] = gx;
                out[(c + ci) * p + y * w + x] = gy;
            }
        }
    }
    out
}

/// Adjoint of [`sobel`].
pub(crate) fn sobel_backward<T: Real>(dout: &[T], dsrc: &mut [T], c: usize, h: usize, w: usize) {
    let p = h * w;
    let kx_t = SOBEL_X.map(|r| r.map(T::lit));
    let ky_t = SOBEL_Y.map(|r| r.map(T::lit));
    for ci in 0..c {
        let d = &mut dsrc[ci * p..(ci + 1) * p];
        for y in 0..h {
            for x in 0..w {
                let gx = dout[ci * p + y * w + x];
                let gy = dout[(c + ci) * p + y * w + x];
                for dy in 0..3 {
                    let sy = reflect(y as isize + dy as isize - 1, h);
                    for dx in 0..3 {
                        let sx = reflect(x as isize + dx as isize - 1, w);
                        d[sy * w + sx] += kx_t[dy][dx] * gx + ky_t[dy][dx] * gy;
                    }
                }
            }
        }
    }
}

/// Separable filter with "valid" extent: output `[C, H-K+1, W-K+1]`.
pub(crate) fn filter_valid<T: Real>(src: &[T], k: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            let t = &mut tmp[y * ow..(y + 1) * ow];
            t.iter_mut().for_each(|v| *v = T::zero());
            for (j, &kv) in k.iter().enumerate() {
                for (a, &b) in t.iter_mut().zip(&row[j..j + ow]) {
                    *a += kv * b;
                }
            }
        }
        let o = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            let orow = &mut o[y * ow..(y + 1) * ow];
            for (j, &kv) in k.iter().enumerate() {
                for (a, &b) in orow.iter_mut().zip(&tmp[(y + j) * ow..(y + j + 1) * ow]) {
                    *a += kv * b;
                }
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
pub(crate) fn filter_valid_backward<T: Real>(
    dout: &[T],
    k: &[T],
    dsrc: &mut [T],
    c: usize,
    h: usize,
    w: usize,
) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut dtmp = vec![T::zero(); h * ow];
    for ci in 0..c {
        dtmp.iter_mut().for_each(|v| *v = T::zero());
        let g = &dout[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            let grow = &g[y * ow..(y + 1) * ow];
            for (j, &kv) in k.iter().enumerate() {
                for (a, &b) in dtmp[(y + j) * ow..(y + j + 1) * ow].iter_mut().zip(grow) {
                    *a += kv * b;
                }
            }
        }
        let d = &mut dsrc[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            let t = &dtmp[y * ow..(y + 1) * ow];
            let drow = &mut d[y * w..(y + 1) * w];
            for (j, &kv) in k.iter().enumerate() {
                for (a, &b) in drow[j..j + ow].iter_mut().zip(t) {
                    *a += kv * b;
                }
            }
        }
    }
}

/// Bilinear interpolation matrix `[out_len, in_len]` with half-pixel centers
/// (sample points clamped at the leading edge).
pub(crate) fn bilinear_matrix<T: Real>(out_len: usize, in_len: usize) -> Vec<T> {
    let mut m = vec![T::zero(); out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let lam = src - i0 as f64;
        m[o * in_len + i0] += T::lit(1.0 - lam);
        m[o * in_len + i1] += T::lit(lam);
    }
    m
}

/// `out[c] = rh * x[c] * rw^T` for every channel.
pub(crate) fn resize<T: Real>(
    src: &[T],
    rh: &[T],
    rw: &[T],
    c: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut tmp = vec![T::zero(); ih * ow];
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let plane = &src[ci * ih * iw..(ci + 1) * ih * iw];
        matmul(ih, iw, ow, plane, false, rw, true, &mut tmp, T::zero());
        matmul(oh, ih, ow, rh, false, &tmp, false, &mut out[ci * oh * ow..(ci + 1) * oh * ow], T::zero());
    }
    out
}

/// Adjoint of [`resize`]: `dx[c] = rh^T * dout[c] * rw`, accumulated.
pub(crate) fn resize_backward<T: Real>(
    dout: &[T],
    rh: &[T],
    rw: &[T],
    dsrc: &mut [T],
    c: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) {
    let mut tmp = vec![T::zero(); ih * ow];
    for ci in 0..c {
        let g = &dout[ci * oh * ow..(ci + 1) * oh * ow];
        matmul(ih, oh, ow, rh, true, g, false, &mut tmp, T::zero());
        matmul(ih, ow, iw, &tmp, false, rw, false, &mut dsrc[ci * ih * iw..(ci + 1) * ih * iw], T::one());
    }
}
