//! Shared layers: affine maps, layer norm, multi-head attention, feed-forward.

use std::rc::Rc;

use crate::error::Result;
use crate::params::{Ctx, Init, ParamId};
use crate::tensor::{Tensor, Var};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Normal init with std `1/sqrt(d_in)`, zero bias.
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_std(init, name, d_in, d_out, bias, 1.0 / (d_in as f64).sqrt())
    }

    pub fn with_std(
        init: &mut Init<'_>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let mut s = init.scope(name);
        let weight = if std == 0.0 {
            s.zeros("weight", &[d_in, d_out])?
        } else {
            s.normal("weight", &[d_in, d_out], std)?
        };
        let bias = if bias { Some(s.zeros("bias", &[d_out])?) } else { None };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn zeros(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_std(init, name, d_in, d_out, bias, 0.0)
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let y = x.matmul(ctx.param(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(ctx.param(b)),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(LayerNorm {
            gain: s.constant("gain", &[dim], 1.0)?,
            bias: s.zeros("bias", &[dim])?,
        })
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        x.layer_norm(ctx.param(self.gain), ctx.param(self.bias))
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// sources.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

pub struct AttentionOutput<'a> {
    pub out: Var<'a>,
    /// Per-head `[N_q, N_k]` attention weights.
    pub weights: Vec<Rc<Tensor>>,
}

impl Attention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, zero_output: bool) -> Result<Self> {
        assert!(heads > 0 && dim % heads == 0, "embed dim {dim} not divisible by {heads} heads");
        let mut s = init.scope(name);
        let output = if zero_output {
            Linear::zeros(&mut s, "output", dim, dim, true)?
        } else {
            Linear::new(&mut s, "output", dim, dim, true)?
        };
        Ok(Attention {
            query: Linear::new(&mut s, "query", dim, dim, true)?,
            key: Linear::new(&mut s, "key", dim, dim, true)?,
            value: Linear::new(&mut s, "value", dim, dim, true)?,
            output,
            heads,
        })
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, queries: Var<'a>, context: Var<'a>) -> Result<AttentionOutput<'a>> {
        let q = self.query.forward(ctx, queries)?;
        let k = self.key.forward(ctx, context)?;
        let v = self.value.forward(ctx, context)?;
        let dim = self.query.d_out;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let start = h * head_dim;
                (
                    q.slice_cols(start, head_dim)?,
                    k.slice_cols(start, head_dim)?,
                    v.slice_cols(start, head_dim)?,
                )
            };
            let attn = qh.matmul(kh.transpose()?)?.scale(scale).softmax_rows()?;
            weights.push(attn.value());
            outs.push(attn.matmul(vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs)? };
        Ok(AttentionOutput {
            out: self.output.forward(ctx, merged)?,
            weights,
        })
    }
}

/// Two affine maps with GELU between.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, ratio: usize, zero_output: bool) -> Result<Self> {
        let mut s = init.scope(name);
        let hidden = dim * ratio;
        let fc1 = Linear::new(&mut s, "fc1", dim, hidden, true)?;
        let fc2 = if zero_output {
            Linear::zeros(&mut s, "fc2", hidden, dim, true)?
        } else {
            Linear::new(&mut s, "fc2", hidden, dim, true)?
        };
        Ok(Ffn { fc1, fc2 })
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let h = self.fc1.forward(ctx, x)?.gelu();
        self.fc2.forward(ctx, h)
    }
}
