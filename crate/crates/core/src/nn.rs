//! Layer primitives. Each layer records the names of its parameters at
//! declaration time and reads them back from a [`Ctx`] during forward.

use crate::error::{ensure, Result};
use crate::params::{Ctx, InitKind, Initializer, ParamStore};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Collects parameter declarations into a fresh [`ParamStore`].
pub struct Builder<T: Real> {
    pub store: ParamStore<T>,
    init: Initializer,
}

impl<T: Real> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::new(),
            init: Initializer::new(seed),
        }
    }

    pub fn add(&mut self, name: String, dims: &[usize], kind: InitKind) -> Result<String> {
        let t = self.init.tensor(&name, dims, kind);
        self.store.insert(&name, t)?;
        Ok(name)
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        self.store.set(name, t)
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

#[derive(Debug, Clone)]
pub struct Conv1x1 {
    weight: String,
    bias: Option<String>,
    pub cin: usize,
    pub cout: usize,
}

impl Conv1x1 {
    pub fn declare<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        init: InitKind,
    ) -> Result<Self> {
        let weight = b.add(format!("{name}.weight"), &[cout, cin], init)?;
        let bias = if bias {
            Some(b.add(format!("{name}.bias"), &[cout], InitKind::Zeros)?)
        } else {
            None
        };
        Ok(Conv1x1 {
            weight,
            bias,
            cin,
            cout,
        })
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(&self.weight)?;
        let b = self.bias.as_deref().map(|n| cx.param(n)).transpose()?;
        cx.tape.conv1x1(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3x3 {
    weight: String,
    bias: Option<String>,
}

impl Conv3x3 {
    pub fn declare<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.add(format!("{name}.weight"), &[cout, cin, 3, 3], InitKind::TruncNormal)?;
        let bias = if bias {
            Some(b.add(format!("{name}.bias"), &[cout], InitKind::Zeros)?)
        } else {
            None
        };
        Ok(Conv3x3 { weight, bias })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(&self.weight)?;
        let b = self.bias.as_deref().map(|n| cx.param(n)).transpose()?;
        cx.tape.conv3x3(x, w, b)
    }
}

#[derive(Debug, Clone)]
struct DwConv3x3 {
    weight: String,
}

impl DwConv3x3 {
    fn declare<T: Real>(b: &mut Builder<T>, name: &str, channels: usize) -> Result<Self> {
        let weight = b.add(format!("{name}.weight"), &[channels, 1, 3, 3], InitKind::TruncNormal)?;
        Ok(DwConv3x3 { weight })
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(&self.weight)?;
        cx.tape.dwconv3x3(x, w)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    weight: String,
    bias: String,
}

impl LayerNorm {
    fn declare<T: Real>(b: &mut Builder<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: b.add(format!("{name}.weight"), &[channels], InitKind::Ones)?,
            bias: b.add(format!("{name}.bias"), &[channels], InitKind::Zeros)?,
        })
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = cx.param(&self.weight)?;
        let b = cx.param(&self.bias)?;
        cx.tape.layer_norm(x, g, b)
    }
}

/// Channel-attention transformer block: layer-normalized multi-head
/// transposed attention followed by a layer-normalized gated depthwise
/// feed-forward, each with a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    dim: usize,
    heads: usize,
    hidden: usize,
    norm1: LayerNorm,
    temperature: String,
    qkv: Conv1x1,
    qkv_dw: DwConv3x3,
    project_out: Conv1x1,
    norm2: LayerNorm,
    ffn_in: Conv1x1,
    ffn_dw: DwConv3x3,
    ffn_out: Conv1x1,
}

impl TransformerBlock {
    pub fn declare<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_expansion: f64,
    ) -> Result<Self> {
        ensure!(
            heads > 0 && dim.is_multiple_of(heads),
            "transformer block {name}: {dim} channels not divisible by {heads} heads"
        );
        let hidden = ((dim as f64 * ffn_expansion) as usize).max(1);
        Ok(TransformerBlock {
            dim,
            heads,
            hidden,
            norm1: LayerNorm::declare(b, &format!("{name}.norm1"), dim)?,
            temperature: b.add(format!("{name}.attn.temperature"), &[heads], InitKind::Ones)?,
            qkv: Conv1x1::declare(b, &format!("{name}.attn.qkv"), dim, 3 * dim, false, InitKind::TruncNormal)?,
            qkv_dw: DwConv3x3::declare(b, &format!("{name}.attn.qkv_dw"), 3 * dim)?,
            project_out: Conv1x1::declare(b, &format!("{name}.attn.project_out"), dim, dim, false, InitKind::TruncNormal)?,
            norm2: LayerNorm::declare(b, &format!("{name}.norm2"), dim)?,
            ffn_in: Conv1x1::declare(b, &format!("{name}.ffn.project_in"), dim, 2 * hidden, false, InitKind::TruncNormal)?,
            ffn_dw: DwConv3x3::declare(b, &format!("{name}.ffn.dwconv"), 2 * hidden)?,
            ffn_out: Conv1x1::declare(b, &format!("{name}.ffn.project_out"), hidden, dim, false, InitKind::TruncNormal)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (c, _, _) = cx.tape.value(x).chw()?;
        ensure!(
            c == self.dim,
            "transformer block expects {} channels, got {c}",
            self.dim
        );
        let d = self.dim;
        let y = self.norm1.forward(cx, x)?;
        let qkv = self.qkv.forward(cx, y)?;
        let qkv = self.qkv_dw.forward(cx, qkv)?;
        let q = cx.tape.slice_channels(qkv, 0, d)?;
        let k = cx.tape.slice_channels(qkv, d, d)?;
        let v = cx.tape.slice_channels(qkv, 2 * d, d)?;
        let temp = cx.param(&self.temperature)?;
        let a = cx.tape.channel_attention(q, k, v, temp, self.heads)?;
        let a = self.project_out.forward(cx, a)?;
        let x = cx.tape.add(x, a)?;

        let y = self.norm2.forward(cx, x)?;
        let h = self.ffn_in.forward(cx, y)?;
        let h = self.ffn_dw.forward(cx, h)?;
        let h1 = cx.tape.slice_channels(h, 0, self.hidden)?;
        let h2 = cx.tape.slice_channels(h, self.hidden, self.hidden)?;
        let gate = cx.tape.gelu(h1);
        let g = cx.tape.mul(gate, h2)?;
        let f = self.ffn_out.forward(cx, g)?;
        cx.tape.add(x, f)
    }
}
