//! Dense row-major tensors and the scalar trait the network is generic over.
//!
//! Feature maps are laid out channel-major as `[C, H, W]`; parameters use
//! whatever shape their layer declares. Training runs in `f32`, gradient
//! checks in `f64`.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Floating point element type usable by the network.
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit strides (see `matrixmultiply`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn erf(self) -> Self;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:ident, $erf:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Bounds of the strided views; matrixmultiply works on raw pointers.
                let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= extent(m, k, rsa, csa));
                assert!(b.len() >= extent(k, n, rsb, csb));
                assert!(c.len() >= extent(m, n, rsc, csc));
                unsafe {
                    matrixmultiply::$gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn erf(self) -> Self {
                $erf(self)
            }
        }
    };
}

impl_real!(f32, sgemm, libm::erff);
impl_real!(f64, dgemm, libm::erf);

/// Row-major matrix product `a[m,k] * b[k,n]`, accumulated into `c` with `beta`.
///
/// Weight gradients contract over all pixels into a small matrix; with the
/// second operand transposed that shape is faster as plain dot products than
/// through the packed gemm.
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    beta: T,
) {
    if trans_b && !trans_a && k >= WIDE {
        return matmul_dots(m, k, n, a, b, c, beta);
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

const WIDE: usize = 256;

fn scale_rows<T: Real>(c: &mut [T], beta: T) {
    if beta == T::zero() {
        c.iter_mut().for_each(|v| *v = T::zero());
    } else if beta != T::one() {
        c.iter_mut().for_each(|v| *v *= beta);
    }
}

/// `c[i,j] += dot(a[i,:], bt[j,:])` where `b = bt^T`, over pixel blocks
/// small enough to stay cache resident.
fn matmul_dots<T: Real>(m: usize, k: usize, n: usize, a: &[T], bt: &[T], c: &mut [T], beta: T) {
    const BLOCK: usize = 1024;
    scale_rows(&mut c[..m * n], beta);
    for k0 in (0..k).step_by(BLOCK) {
        let k1 = (k0 + BLOCK).min(k);
        for i in 0..m {
            let arow = &a[i * k + k0..i * k + k1];
            let crow = &mut c[i * n..(i + 1) * n];
            let mut j = 0;
            while j + 4 <= n {
                let d = dot4(arow, [0, 1, 2, 3].map(|q| &bt[(j + q) * k + k0..(j + q) * k + k1]));
                for q in 0..4 {
                    crow[j + q] += d[q];
                }
                j += 4;
            }
            for (jj, cv) in crow.iter_mut().enumerate().skip(j) {
                *cv += dot(arow, &bt[jj * k + k0..jj * k + k1]);
            }
        }
    }
}

const LANES: usize = 16;

fn reduce_lanes<T: Real>(acc: &[T; LANES]) -> T {
    acc.iter().copied().fold(T::zero(), |s, v| s + v)
}

/// Four dot products sharing the left operand, each summed like [`dot`].
fn dot4<T: Real>(x: &[T], ys: [&[T]; 4]) -> [T; 4] {
    let mut acc = [[T::zero(); LANES]; 4];
    let lanes = |s: &[T]| -> [T; LANES] { s.try_into().expect("chunk") };
    let chunks = x
        .chunks_exact(LANES)
        .zip(ys[0].chunks_exact(LANES))
        .zip(ys[1].chunks_exact(LANES))
        .zip(ys[2].chunks_exact(LANES))
        .zip(ys[3].chunks_exact(LANES));
    for ((((xs, y0), y1), y2), y3) in chunks {
        let xs = lanes(xs);
        for (q, yq) in [y0, y1, y2, y3].into_iter().enumerate() {
            let yq = lanes(yq);
            for l in 0..LANES {
                acc[q][l] += xs[l] * yq[l];
            }
        }
    }
    let full = x.len() / LANES * LANES;
    let mut out = [T::zero(); 4];
    for q in 0..4 {
        out[q] = reduce_lanes(&acc[q]);
        for i in full..x.len() {
            out[q] += x[i] * ys[q][i];
        }
    }
    out
}

/// Dot product with a fixed lane-wise summation order.
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut s = reduce_lanes(&acc);
    for (&a, &b) in xr.iter().zip(yr) {
        s += a * b;
    }
    s
}

/// An owned, contiguous, row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        ensure!(
            n == data.len(),
            "tensor of shape {dims:?} needs {n} elements, got {}",
            data.len()
        );
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as a `[C, H, W]` feature map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        ensure!(
            self.dims.len() == 3,
            "expected a [C, H, W] feature map, got shape {:?}",
            self.dims
        );
        Ok((self.dims[0], self.dims[1], self.dims[2]))
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        ensure!(
            n == self.data.len(),
            "cannot reshape {:?} into {dims:?}",
            self.dims
        );
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

/// `[C, H, W]` -> `[C*r*r, H/r, W/r]`, output channel `c*r*r + dy*r + dx`
/// holding input pixel `(y*r + dy, x*r + dx)` of channel `c`.
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    ensure!(r >= 1, "pixel_unshuffle factor must be positive");
    ensure!(
        h % r == 0 && w % r == 0,
        "pixel_unshuffle: spatial dims {h}x{w} not divisible by {r}"
    );
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let oc = (ci * r + dy) * r + dx;
                let dst = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
                for y in 0..oh {
                    let row = &src[(ci * h + y * r + dy) * w..];
                    for xo in 0..ow {
                        dst[y * ow + xo] = row[xo * r + dx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * r * r, oh, ow], out)
}

/// Exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    ensure!(r >= 1, "pixel_shuffle factor must be positive");
    ensure!(
        c % (r * r) == 0,
        "pixel_shuffle: {c} channels not divisible by {}",
        r * r
    );
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for co in 0..oc {
        for dy in 0..r {
            for dx in 0..r {
                let ic = (co * r + dy) * r + dx;
                let plane = &src[ic * h * w..(ic + 1) * h * w];
                for y in 0..h {
                    let row = &mut out[(co * oh + y * r + dy) * ow..];
                    for xi in 0..w {
                        row[xi * r + dx] = plane[y * w + xi];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oc, oh, ow], out)
}
