//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its adjoint. Nodes are appended in evaluation order, so a
//! single reverse sweep visits them in a valid topological order.

pub(crate) mod kernels;

use crate::error::{ensure, Result};
use crate::tensor::{matmul, pixel_shuffle, pixel_unshuffle, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv1x1 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    DwConv3x3 {
        x: Var,
        w: Var,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulMap {
        x: Var,
        m: Var,
    },
    Scale(Var, T),
    AddScalar(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Gelu {
        x: Var,
        cdf: Vec<T>,
    },
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Attention(Box<AttentionSaved<T>>),
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    SpatialMean(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    Mix {
        w: Var,
        bank: Var,
    },
    Resize {
        x: Var,
        rh: Vec<T>,
        rw: Vec<T>,
    },
    Mean(Var),
    ChannelMix {
        x: Var,
        matrix: Vec<T>,
    },
    Sobel(Var),
    FilterValid {
        x: Var,
        kernel: Vec<T>,
    },
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    temp: Var,
    heads: usize,
    qn: Vec<T>,
    kn: Vec<T>,
    qnorm: Vec<T>,
    knorm: Vec<T>,
    sim: Vec<T>,
    attn: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one differentiable computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Only
/// leaves (inputs created with [`Tape::leaf`]) keep their gradient.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(&self.dims[v.0], g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.dims[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .take()
            .map(|g| Tensor::from_vec(&self.dims[v.0], g).expect("grad shape"))
    }
}

fn same_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    ensure!(
        a.dims() == b.dims(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.dims(),
        b.dims()
    );
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn chw(&self, v: Var) -> Result<(usize, usize, usize)> {
        self.value(v).chw()
    }

    /// Pointwise convolution: weights `[Cout, Cin]`, optional bias `[Cout]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (c, h, wd) = self.chw(x)?;
        let wt = self.value(w);
        ensure!(
            wt.dims().len() == 2 && wt.dims()[1] == c,
            "conv1x1: weight {:?} does not accept {c} channels",
            wt.dims()
        );
        let co = wt.dims()[0];
        let p = h * wd;
        let mut out = vec![T::zero(); co * p];
        if let Some(b) = b {
            let bv = self.value(b);
            ensure!(bv.len() == co, "conv1x1: bias length {} != {co}", bv.len());
            for (o, &bb) in bv.data().iter().enumerate() {
                out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bb);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        matmul(co, c, p, wt.data(), false, self.value(x).data(), false, &mut out, beta);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::from_vec(&[co, h, wd], out)?,
            Op::Conv1x1 { x, w, b },
            rg,
        ))
    }

    /// Dense 3x3 convolution with zero padding: weights `[Cout, Cin, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (c, h, wd) = self.chw(x)?;
        let wt = self.value(w);
        ensure!(
            wt.dims().len() == 4 && wt.dims()[1] == c && wt.dims()[2] == 3 && wt.dims()[3] == 3,
            "conv3x3: weight {:?} does not accept {c} channels",
            wt.dims()
        );
        let co = wt.dims()[0];
        let p = h * wd;
        let mut out = vec![T::zero(); co * p];
        if let Some(b) = b {
            let bv = self.value(b);
            ensure!(bv.len() == co, "conv3x3: bias length {} != {co}", bv.len());
            for (o, &bb) in bv.data().iter().enumerate() {
                out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bb);
            }
        }
        let cols = kernels::im2col3x3(self.value(x).data(), c, h, wd);
        let beta = if b.is_some() { T::one() } else { T::zero() };
        matmul(co, c * 9, p, wt.data(), false, &cols, false, &mut out, beta);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::from_vec(&[co, h, wd], out)?,
            Op::Conv3x3 { x, w, b },
            rg,
        ))
    }

    /// Depthwise 3x3 convolution with zero padding: weights `[C, 1, 3, 3]`.
    pub fn dwconv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c, h, wd) = self.chw(x)?;
        ensure!(
            self.value(w).len() == c * 9,
            "dwconv3x3: weight {:?} does not match {c} channels",
            self.value(w).dims()
        );
        let out = kernels::dwconv3x3(self.value(x).data(), self.value(w).data(), c, h, wd);
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::from_vec(&[c, h, wd], out)?,
            Op::DwConv3x3 { x, w },
            rg,
        ))
    }

    /// Per-pixel layer normalization across channels with affine `g`, `b` of length C.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        ensure!(
            self.value(g).len() == c && self.value(b).len() == c,
            "layer_norm: affine parameters must have {c} entries"
        );
        let p = h * w;
        let src = self.value(x).data();
        let inv_c = T::one() / T::lit(c as f64);
        let mut mean = vec![T::zero(); p];
        for ci in 0..c {
            for (m, &v) in mean.iter_mut().zip(&src[ci * p..(ci + 1) * p]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); p];
        for ci in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(&src[ci * p..(ci + 1) * p]).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let eps = T::lit(LN_EPS);
        let rstd: Vec<T> = var.iter().map(|&v| (v * inv_c + eps).sqrt().recip()).collect();
        let mut xhat = vec![T::zero(); c * p];
        let mut out = vec![T::zero(); c * p];
        let (gv, bv) = (self.value(g).data(), self.value(b).data());
        for ci in 0..c {
            let xs = &src[ci * p..(ci + 1) * p];
            let xh = &mut xhat[ci * p..(ci + 1) * p];
            let o = &mut out[ci * p..(ci + 1) * p];
            for i in 0..p {
                xh[i] = (xs[i] - mean[i]) * rstd[i];
                o[i] = xh[i] * gv[ci] + bv[ci];
            }
        }
        let rg = self.rg(&[x, g, b]);
        Ok(self.push(
            Tensor::from_vec(&[c, h, w], out)?,
            Op::LayerNorm { x, g, b, xhat, rstd },
            rg,
        ))
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_dims(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(self.value(a).dims(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `x[c, y, x] * m[0, y, x]`: modulates every channel by a spatial map.
    pub fn mul_map(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        let (mc, mh, mw) = self.chw(m)?;
        ensure!(
            mc == 1 && mh == h && mw == w,
            "mul_map: map {:?} does not match feature {:?}",
            self.value(m).dims(),
            self.value(x).dims()
        );
        let p = h * w;
        let mv = self.value(m).data();
        let mut out = self.value(x).data().to_vec();
        for ci in 0..c {
            for (o, &s) in out[ci * p..(ci + 1) * p].iter_mut().zip(mv) {
                *o *= s;
            }
        }
        let rg = self.rg(&[x, m]);
        Ok(self.push(Tensor::from_vec(&[c, h, w], out)?, Op::MulMap { x, m }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(t, Op::AddScalar(x), rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        ensure!(!xs.is_empty(), "concat of zero tensors");
        let (_, h, w) = self.chw(xs[0])?;
        let mut total = 0;
        let mut data = Vec::new();
        for &v in xs {
            let (c, vh, vw) = self.chw(v)?;
            ensure!(
                vh == h && vw == w,
                "concat: spatial mismatch {vh}x{vw} vs {h}x{w}"
            );
            total += c;
            data.extend_from_slice(self.value(v).data());
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::from_vec(&[total, h, w], data)?,
            Op::Concat(xs.to_vec()),
            rg,
        ))
    }

    /// Channels `start..start+len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        ensure!(
            start + len <= c && len > 0,
            "slice_channels: {start}+{len} exceeds {c} channels"
        );
        let p = h * w;
        let data = self.value(x).data()[start * p..(start + len) * p].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[len, h, w], data)?,
            Op::SliceChannels { x, start },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let cdf: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| half * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        let data = self.value(x).data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let t = Tensor::from_vec(self.value(x).dims(), data).expect("same dims");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu { x, cdf }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// Multi-head transposed (channel) attention.
    ///
    /// `q`, `k`, `v` are `[C, H, W]`; channels are split into `heads` groups.
    /// Within each group, rows of `q` and `k` are L2-normalized over pixels,
    /// the `[C/h, C/h]` similarity is scaled by `temp[head]`, softmaxed per
    /// row and applied to `v`.
    pub fn channel_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        temp: Var,
        heads: usize,
    ) -> Result<Var> {
        let (c, h, w) = self.chw(q)?;
        same_dims(self.value(q), self.value(k), "attention q/k")?;
        same_dims(self.value(q), self.value(v), "attention q/v")?;
        ensure!(
            heads > 0 && c % heads == 0,
            "attention: {c} channels not divisible by {heads} heads"
        );
        ensure!(
            self.value(temp).len() == heads,
            "attention: temperature needs {heads} entries"
        );
        let p = h * w;
        let ch = c / heads;
        let eps = T::lit(NORM_EPS);
        let normalize = |src: &[T]| {
            let mut out = src.to_vec();
            let mut norms = vec![T::zero(); c];
            for (r, n) in norms.iter_mut().enumerate() {
                let row = &mut out[r * p..(r + 1) * p];
                let nn = row.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
                *n = nn;
                let d = nn.max(eps);
                row.iter_mut().for_each(|x| *x /= d);
            }
            (out, norms)
        };
        let (qn, qnorm) = normalize(self.value(q).data());
        let (kn, knorm) = normalize(self.value(k).data());
        let tv = self.value(temp).data().to_vec();
        let vv = self.value(v).data();
        let mut sim = vec![T::zero(); heads * ch * ch];
        let mut attn = vec![T::zero(); heads * ch * ch];
        let mut out = vec![T::zero(); c * p];
        for hd in 0..heads {
            let rows = hd * ch * p..(hd + 1) * ch * p;
            let s = &mut sim[hd * ch * ch..(hd + 1) * ch * ch];
            matmul(ch, p, ch, &qn[rows.clone()], false, &kn[rows.clone()], true, s, T::zero());
            let a = &mut attn[hd * ch * ch..(hd + 1) * ch * ch];
            for i in 0..ch {
                let srow = &s[i * ch..(i + 1) * ch];
                let arow = &mut a[i * ch..(i + 1) * ch];
                let mx = srow
                    .iter()
                    .map(|&x| x * tv[hd])
                    .fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for (o, &x) in arow.iter_mut().zip(srow) {
                    *o = (x * tv[hd] - mx).exp();
                    z += *o;
                }
                arow.iter_mut().for_each(|o| *o /= z);
            }
            matmul(ch, ch, p, a, false, &vv[rows.clone()], false, &mut out[rows], T::zero());
        }
        let rg = self.rg(&[q, k, v, temp]);
        Ok(self.push(
            Tensor::from_vec(&[c, h, w], out)?,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                temp,
                heads,
                qn,
                kn,
                qnorm,
                knorm,
                sim,
                attn,
            })),
            rg,
        ))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = pixel_shuffle(self.value(x), r)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::PixelShuffle(x, r), rg))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = pixel_unshuffle(self.value(x), r)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::PixelUnshuffle(x, r), rg))
    }

    /// Global average pooling `[C, H, W] -> [C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        let p = h * w;
        let inv = T::one() / T::lit(p as f64);
        let src = self.value(x).data();
        let data = (0..c)
            .map(|ci| src[ci * p..(ci + 1) * p].iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[c], data)?, Op::SpatialMean(x), rg))
    }

    /// Affine map of a vector: `w [N, C]`, `b [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let c = self.value(x).len();
        let wd = self.value(w).dims().to_vec();
        ensure!(
            wd.len() == 2 && wd[1] == c,
            "linear: weight {wd:?} does not accept {c} inputs"
        );
        let n = wd[0];
        ensure!(self.value(b).len() == n, "linear: bias must have {n} entries");
        let mut out = self.value(b).data().to_vec();
        matmul(n, c, 1, self.value(w).data(), false, self.value(x).data(), false, &mut out, T::one());
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::from_vec(&[n], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Softmax over all elements.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mx = src.data().iter().copied().fold(T::neg_infinity(), T::max);
        let mut t = src.map(|v| (v - mx).exp());
        let z = t.sum();
        t.data_mut().iter_mut().for_each(|v| *v /= z);
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// `sum_i w[i] * bank[i]` for `w [N]`, `bank [N, C, H, W]`.
    pub fn mix(&mut self, w: Var, bank: Var) -> Result<Var> {
        let bd = self.value(bank).dims().to_vec();
        ensure!(bd.len() == 4, "mix: bank must be [N, C, H, W], got {bd:?}");
        let n = bd[0];
        ensure!(self.value(w).len() == n, "mix: {n} components but {} weights", self.value(w).len());
        let m = bd[1] * bd[2] * bd[3];
        let mut out = vec![T::zero(); m];
        matmul(1, n, m, self.value(w).data(), false, self.value(bank).data(), false, &mut out, T::zero());
        let rg = self.rg(&[w, bank]);
        Ok(self.push(
            Tensor::from_vec(&bd[1..], out)?,
            Op::Mix { w, bank },
            rg,
        ))
    }

    /// Bilinear resize of every channel to `oh x ow` (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        ensure!(oh > 0 && ow > 0, "resize: empty target");
        let rh = kernels::bilinear_matrix(oh, h);
        let rw = kernels::bilinear_matrix(ow, w);
        let out = kernels::resize(self.value(x).data(), &rh, &rw, c, (h, w), (oh, ow));
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[c, oh, ow], out)?,
            Op::Resize { x, rh, rw },
            rg,
        ))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let m = src.sum() / T::lit(src.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Fixed per-pixel affine color map: `y[k] = sum_c matrix[k][c] x[c] + offset[k]`.
    pub fn channel_mix(&mut self, x: Var, matrix: &[Vec<f64>], offset: &[f64]) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        ensure!(
            matrix.iter().all(|r| r.len() == c) && offset.len() == matrix.len(),
            "channel_mix: matrix does not accept {c} channels"
        );
        let k = matrix.len();
        let p = h * w;
        let flat: Vec<T> = matrix.iter().flatten().map(|&v| T::lit(v)).collect();
        let mut out = vec![T::zero(); k * p];
        for (o, &off) in offset.iter().enumerate() {
            out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = T::lit(off));
        }
        matmul(k, c, p, &flat, false, self.value(x).data(), false, &mut out, T::one());
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[k, h, w], out)?,
            Op::ChannelMix { x, matrix: flat },
            rg,
        ))
    }

    /// Reflect-padded Sobel: `[C, H, W] -> [2C, H, W]` (all gx, then all gy).
    pub fn sobel(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        ensure!(h >= 3 && w >= 3, "sobel: image {h}x{w} smaller than 3x3");
        let out = kernels::sobel(self.value(x).data(), c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[2 * c, h, w], out)?, Op::Sobel(x), rg))
    }

    /// Separable filtering of every channel with a 1-D kernel, valid extent.
    pub fn filter_valid(&mut self, x: Var, kernel: &[f64]) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        let n = kernel.len();
        ensure!(
            n >= 1 && h >= n && w >= n,
            "filter_valid: image {h}x{w} smaller than window {n}"
        );
        let kernel: Vec<T> = kernel.iter().map(|&v| T::lit(v)).collect();
        let out = kernels::filter_valid(self.value(x).data(), &kernel, c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[c, h + 1 - n, w + 1 - n], out)?,
            Op::FilterValid { x, kernel },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            // only leaf gradients are observable; intermediates are freed early
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Grads {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Accumulation buffer for an input, or None if it needs no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1x1 { x, w, b } | Op::Conv3x3 { x, w, b } => {
                let is3 = matches!(node.op, Op::Conv3x3 { .. });
                let (c, h, wd) = self.nodes[x.0].value.chw().expect("chw");
                let p = h * wd;
                let co = node.value.dims()[0];
                let kk = if is3 { c * 9 } else { c };
                let cols;
                let xin: &[T] = if is3 {
                    cols = kernels::im2col3x3(val(*x), c, h, wd);
                    &cols
                } else {
                    val(*x)
                };
                if let Some(dw) = acc!(*w) {
                    matmul(co, p, kk, g, false, xin, true, dw, T::one());
                }
                if let Some(b) = b {
                    if let Some(db) = acc!(*b) {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += g[o * p..(o + 1) * p].iter().copied().sum::<T>();
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    if is3 {
                        let mut dcols = vec![T::zero(); kk * p];
                        matmul(kk, co, p, val(*w), true, g, false, &mut dcols, T::zero());
                        let dx = acc!(*x).expect("requires grad");
                        kernels::col2im3x3(&dcols, dx, c, h, wd);
                    } else {
                        let wv = val(*w);
                        let dx = acc!(*x).expect("requires grad");
                        matmul(kk, co, p, wv, true, g, false, dx, T::one());
                    }
                }
            }
            Op::DwConv3x3 { x, w } => {
                let (c, h, wd) = self.nodes[x.0].value.chw().expect("chw");
                let (xv, wv) = (val(*x), val(*w));
                let mut dx_buf = self.nodes[x.0].requires_grad.then(|| vec![T::zero(); c * h * wd]);
                let mut dw_buf = self.nodes[w.0].requires_grad.then(|| vec![T::zero(); c * 9]);
                kernels::dwconv3x3_backward(
                    xv,
                    wv,
                    g,
                    c,
                    h,
                    wd,
                    dx_buf.as_deref_mut(),
                    dw_buf.as_deref_mut(),
                );
                if let Some(b) = dx_buf {
                    add_into(acc!(*x).expect("requires grad"), &b);
                }
                if let Some(b) = dw_buf {
                    add_into(acc!(*w).expect("requires grad"), &b);
                }
            }
            Op::LayerNorm { x, g: gam, b, xhat, rstd } => {
                let (c, h, wd) = self.nodes[x.0].value.chw().expect("chw");
                let p = h * wd;
                let gv = val(*gam);
                if let Some(dg) = acc!(*gam) {
                    for ci in 0..c {
                        dg[ci] += g[ci * p..(ci + 1) * p]
                            .iter()
                            .zip(&xhat[ci * p..(ci + 1) * p])
                            .fold(T::zero(), |s, (&a, &b)| s + a * b);
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ci in 0..c {
                        db[ci] += g[ci * p..(ci + 1) * p].iter().copied().sum::<T>();
                    }
                }
                if let Some(dx) = acc!(*x) {
                    let mut s1 = vec![T::zero(); p];
                    let mut s2 = vec![T::zero(); p];
                    for ci in 0..c {
                        for i in 0..p {
                            let dxh = g[ci * p + i] * gv[ci];
                            s1[i] += dxh;
                            s2[i] += dxh * xhat[ci * p + i];
                        }
                    }
                    let inv_c = T::one() / T::lit(c as f64);
                    for ci in 0..c {
                        for i in 0..p {
                            let dxh = g[ci * p + i] * gv[ci];
                            dx[ci * p + i] +=
                                rstd[i] * (dxh - inv_c * (s1[i] + xhat[ci * p + i] * s2[i]));
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(d) = acc!(*a) {
                    add_into(d, g);
                }
                if let Some(d) = acc!(*b) {
                    add_into(d, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = acc!(*a) {
                    add_into(d, g);
                }
                if let Some(d) = acc!(*b) {
                    d.iter_mut().zip(g).for_each(|(a, &b)| *a -= b);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(d) = acc!(*a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if let Some(d) = acc!(*b) {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if let Some(d) = acc!(*a) {
                    for i in 0..d.len() {
                        d[i] += g[i] / bv[i];
                    }
                }
                if let Some(d) = acc!(*b) {
                    for i in 0..d.len() {
                        d[i] -= g[i] * out[i] / bv[i];
                    }
                }
            }
            Op::MulMap { x, m } => {
                let (c, h, w) = self.nodes[x.0].value.chw().expect("chw");
                let p = h * w;
                let (xv, mv) = (val(*x), val(*m));
                if let Some(d) = acc!(*x) {
                    for ci in 0..c {
                        for i in 0..p {
                            d[ci * p + i] += g[ci * p + i] * mv[i];
                        }
                    }
                }
                if let Some(d) = acc!(*m) {
                    for ci in 0..c {
                        for i in 0..p {
                            d[i] += g[ci * p + i] * xv[ci * p + i];
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *s);
                }
            }
            Op::AddScalar(x) => {
                if let Some(d) = acc!(*x) {
                    add_into(d, g);
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.nodes[x.0].value.len();
                    if let Some(d) = acc!(x) {
                        add_into(d, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceChannels { x, start } => {
                let (_, h, w) = self.nodes[x.0].value.chw().expect("chw");
                let off = start * h * w;
                if let Some(d) = acc!(*x) {
                    add_into(&mut d[off..off + g.len()], g);
                }
            }
            Op::Gelu { x, cdf } => {
                let xv = val(*x);
                let half = T::lit(0.5);
                let inv_sqrt2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                if let Some(d) = acc!(*x) {
                    for i in 0..d.len() {
                        let v = xv[i];
                        let pdf = inv_sqrt2pi * (-half * v * v).exp();
                        d[i] += g[i] * (cdf[i] + v * pdf);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = acc!(*x) {
                    for i in 0..d.len() {
                        d[i] += g[i] * out[i] * (T::one() - out[i]);
                    }
                }
            }
            Op::Abs(x) => {
                let xv = val(*x);
                if let Some(d) = acc!(*x) {
                    for i in 0..d.len() {
                        let s = if xv[i] > T::zero() {
                            T::one()
                        } else if xv[i] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        d[i] += g[i] * s;
                    }
                }
            }
            Op::Square(x) => {
                let xv = val(*x);
                if let Some(d) = acc!(*x) {
                    let two = T::lit(2.0);
                    for i in 0..d.len() {
                        d[i] += g[i] * two * xv[i];
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(d) = acc!(*x) {
                    let half = T::lit(0.5);
                    for i in 0..d.len() {
                        d[i] += g[i] * half / out[i];
                    }
                }
            }
            Op::Attention(s) => self.attention_backward(s, node, g, grads),
            Op::PixelShuffle(x, r) => {
                if let Some(d) = acc!(*x) {
                    let gt = Tensor::from_vec(node.value.dims(), g.to_vec()).expect("dims");
                    add_into(d, pixel_unshuffle(&gt, *r).expect("inverse").data());
                }
            }
            Op::PixelUnshuffle(x, r) => {
                if let Some(d) = acc!(*x) {
                    let gt = Tensor::from_vec(node.value.dims(), g.to_vec()).expect("dims");
                    add_into(d, pixel_shuffle(&gt, *r).expect("inverse").data());
                }
            }
            Op::SpatialMean(x) => {
                let (c, h, w) = self.nodes[x.0].value.chw().expect("chw");
                let p = h * w;
                let inv = T::one() / T::lit(p as f64);
                if let Some(d) = acc!(*x) {
                    for ci in 0..c {
                        let gv = g[ci] * inv;
                        d[ci * p..(ci + 1) * p].iter_mut().for_each(|v| *v += gv);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let n = node.value.len();
                let c = self.nodes[x.0].value.len();
                let (xv, wv) = (val(*x), val(*w));
                if let Some(d) = acc!(*w) {
                    matmul(n, 1, c, g, false, xv, false, d, T::one());
                }
                if let Some(d) = acc!(*b) {
                    add_into(d, g);
                }
                if let Some(d) = acc!(*x) {
                    matmul(c, n, 1, wv, true, g, false, d, T::one());
                }
            }
            Op::Softmax(x) => {
                if let Some(d) = acc!(*x) {
                    let dot = g.iter().zip(out).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for i in 0..d.len() {
                        d[i] += out[i] * (g[i] - dot);
                    }
                }
            }
            Op::Mix { w, bank } => {
                let n = self.nodes[w.0].value.len();
                let m = g.len();
                let (wv, bv) = (val(*w), val(*bank));
                if let Some(d) = acc!(*w) {
                    matmul(n, m, 1, bv, false, g, false, d, T::one());
                }
                if let Some(d) = acc!(*bank) {
                    matmul(n, 1, m, wv, false, g, false, d, T::one());
                }
            }
            Op::Resize { x, rh, rw } => {
                let (c, h, w) = self.nodes[x.0].value.chw().expect("chw");
                let (_, oh, ow) = node.value.chw().expect("chw");
                if let Some(d) = acc!(*x) {
                    kernels::resize_backward(g, rh, rw, d, c, (h, w), (oh, ow));
                }
            }
            Op::Mean(x) => {
                if let Some(d) = acc!(*x) {
                    let gv = g[0] / T::lit(d.len() as f64);
                    d.iter_mut().for_each(|v| *v += gv);
                }
            }
            Op::ChannelMix { x, matrix } => {
                let (c, h, w) = self.nodes[x.0].value.chw().expect("chw");
                let k = node.value.dims()[0];
                if let Some(d) = acc!(*x) {
                    matmul(c, k, h * w, matrix, true, g, false, d, T::one());
                }
            }
            Op::Sobel(x) => {
                let (c, h, w) = self.nodes[x.0].value.chw().expect("chw");
                if let Some(d) = acc!(*x) {
                    kernels::sobel_backward(g, d, c, h, w);
                }
            }
            Op::FilterValid { x, kernel } => {
                let (c, h, w) = self.nodes[x.0].value.chw().expect("chw");
                if let Some(d) = acc!(*x) {
                    kernels::filter_valid_backward(g, kernel, d, c, h, w);
                }
            }
        }
    }

    fn attention_backward(
        &self,
        s: &AttentionSaved<T>,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (c, h, w) = node.value.chw().expect("chw");
        let p = h * w;
        let heads = s.heads;
        let ch = c / heads;
        let tv = self.nodes[s.temp.0].value.data();
        let vv = self.nodes[s.v.0].value.data();
        let eps = T::lit(NORM_EPS);
        let mut dq = vec![T::zero(); c * p];
        let mut dk = vec![T::zero(); c * p];
        let mut dv = vec![T::zero(); c * p];
        let mut dtemp = vec![T::zero(); heads];
        let mut dattn = vec![T::zero(); ch * ch];
        for hd in 0..heads {
            let rows = hd * ch * p..(hd + 1) * ch * p;
            let a = &s.attn[hd * ch * ch..(hd + 1) * ch * ch];
            let sim = &s.sim[hd * ch * ch..(hd + 1) * ch * ch];
            let gh = &g[rows.clone()];
            matmul(ch, p, ch, gh, false, &vv[rows.clone()], true, &mut dattn, T::zero());
            matmul(ch, ch, p, a, true, gh, false, &mut dv[rows.clone()], T::zero());
            // softmax adjoint, then through the temperature scaling
            let mut dsim = vec![T::zero(); ch * ch];
            for i in 0..ch {
                let arow = &a[i * ch..(i + 1) * ch];
                let drow = &dattn[i * ch..(i + 1) * ch];
                let dot = arow.iter().zip(drow).fold(T::zero(), |s, (&x, &y)| s + x * y);
                for j in 0..ch {
                    let dl = arow[j] * (drow[j] - dot);
                    dtemp[hd] += dl * sim[i * ch + j];
                    dsim[i * ch + j] = dl * tv[hd];
                }
            }
            matmul(ch, ch, p, &dsim, false, &s.kn[rows.clone()], false, &mut dq[rows.clone()], T::zero());
            matmul(ch, ch, p, &dsim, true, &s.qn[rows.clone()], false, &mut dk[rows.clone()], T::zero());
        }
        // through the row normalization
        let renorm = |dn: &mut [T], xn: &[T], norms: &[T]| {
            for r in 0..c {
                let drow = &mut dn[r * p..(r + 1) * p];
                let nrow = &xn[r * p..(r + 1) * p];
                if norms[r] > eps {
                    let dot = drow.iter().zip(nrow).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for (d, &n) in drow.iter_mut().zip(nrow) {
                        *d = (*d - n * dot) / norms[r];
                    }
                } else {
                    drow.iter_mut().for_each(|d| *d /= eps);
                }
            }
        };
        renorm(&mut dq, &s.qn, &s.qnorm);
        renorm(&mut dk, &s.kn, &s.knorm);
        for (var, buf) in [(s.q, dq), (s.k, dk), (s.v, dv), (s.temp, dtemp)] {
            if self.nodes[var.0].requires_grad {
                let len = buf.len();
                let d = grads[var.0].get_or_insert_with(|| vec![T::zero(); len]);
                add_into(d, &buf);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests;

