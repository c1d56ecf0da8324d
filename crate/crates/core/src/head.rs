//! Fusion of the two modality responses and the center-based box head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Ctx, Init, Mode, ParamId};
use crate::tensor::{kernels, ConvSpec, Tensor, Var};

/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;
/// Classification output bias so the initial score is about 0.1.
const SCORE_PRIOR_BIAS: f64 = -2.19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub embed_dim: usize,
    /// Channel width inside each tower.
    pub width: usize,
    /// Conv-norm-ReLU stages per tower.
    pub depth: usize,
}

/// Axis-aligned box in pixels: top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Intersection over union; zero when either box is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        let inter = ix.max(0.0) * iy.max(0.0);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// Decoded box with its peak classification value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Per-channel affine batch normalization over a `[C, B*H*W]` batch.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut s = init.scope(name);
        let dtype = s.dtype();
        Ok(BatchNorm {
            gain: s.constant("gain", &[channels], 1.0)?,
            bias: s.zeros("bias", &[channels])?,
            running_mean: s.buffer("running_mean", Tensor::zeros(&[channels], dtype))?,
            running_var: s.buffer("running_var", Tensor::ones(&[channels], dtype))?,
        })
    }

    /// Normalizes channels of `x: [C, M]`. Training mode uses the statistics
    /// of `x` and queues a running-statistics update; evaluation mode uses the
    /// stored running statistics.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let gain = ctx.param(self.gain);
        let bias = ctx.param(self.bias);
        match ctx.mode() {
            Mode::Train => {
                let v = x.value();
                let (c, m) = v.dims2()?;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (ch, row) in v.data().chunks(m).enumerate() {
                    mean[ch] = row.iter().sum::<f64>() / m as f64;
                    var[ch] = row.iter().map(|r| (r - mean[ch]).powi(2)).sum::<f64>() / m as f64;
                }
                let store = ctx.store();
                let blend = |id: ParamId, batch: &[f64]| {
                    let old = store.get(id);
                    let data = old
                        .data()
                        .iter()
                        .zip(batch)
                        .map(|(o, b)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * b)
                        .collect();
                    Tensor::from_parts(old.shape().to_vec(), data, old.dtype())
                };
                ctx.record_stat(self.running_mean, blend(self.running_mean, &mean));
                ctx.record_stat(self.running_var, blend(self.running_var, &var));
                x.normalize_rows()?.mul_col(gain)?.add_col(bias)
            }
            Mode::Eval => {
                let rm = ctx.store().get(self.running_mean);
                let rv = ctx.store().get(self.running_var);
                let inv = rv.map(|v| 1.0 / (v + kernels::NORM_EPS).sqrt());
                let scale = gain.mul(ctx.constant(inv))?;
                let shift = bias.sub(scale.mul(ctx.constant(rm.clone()))?)?;
                x.mul_col(scale)?.add_col(shift)
            }
        }
    }
}

/// One conv-norm-ReLU stage.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    /// `[C_out, C_in, 3, 3]`
    pub kernel: ParamId,
    pub norm: BatchNorm,
}

/// A tower of conv-norm-ReLU stages ending in a 1x1 conv and a sigmoid.
#[derive(Clone, Debug)]
pub struct Tower {
    pub stages: Vec<ConvBnRelu>,
    /// `[out, width, 1, 1]`
    pub out_kernel: ParamId,
    pub out_bias: ParamId,
    pub out_channels: usize,
}

impl Tower {
    fn new(init: &mut Init<'_>, name: &str, cfg: &HeadConfig, out_channels: usize, out_bias: f64) -> Result<Self> {
        let mut s = init.scope(name);
        let mut stages = Vec::with_capacity(cfg.depth);
        let mut c_in = cfg.embed_dim;
        for i in 0..cfg.depth {
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            stages.push(ConvBnRelu {
                kernel: s.normal(&format!("conv{i}"), &[cfg.width, c_in, 3, 3], std)?,
                norm: BatchNorm::new(&mut s, &format!("bn{i}"), cfg.width)?,
            });
            c_in = cfg.width;
        }
        Ok(Tower {
            stages,
            out_kernel: s.normal("out", &[out_channels, c_in, 1, 1], 0.01)?,
            out_bias: s.constant("out_bias", &[out_channels], out_bias)?,
            out_channels,
        })
    }

    /// Runs every `[C, H, W]` input through the tower, normalizing across the
    /// whole batch. Returns pre-sigmoid maps `[out, H, W]`.
    fn forward<'a>(&self, ctx: &Ctx<'a>, inputs: &[Var<'a>]) -> Result<Vec<Var<'a>>> {
        let mut xs = inputs.to_vec();
        for stage in &self.stages {
            let conv: Vec<Var<'a>> = xs
                .iter()
                .map(|x| x.conv2d(ctx.param(stage.kernel), None, ConvSpec::dense(1)))
                .collect::<Result<_>>()?;
            let shape = conv[0].shape();
            let (c, hw) = (shape[0], shape[1] * shape[2]);
            let flat: Vec<Var<'a>> = conv.iter().map(|v| v.reshape(&[c, hw])).collect::<Result<_>>()?;
            let joined = if flat.len() == 1 { flat[0] } else { Var::concat_cols(&flat)? };
            let normed = stage.norm.forward(ctx, joined)?.relu();
            xs = (0..flat.len())
                .map(|b| {
                    let part = if flat.len() == 1 { normed } else { normed.slice_cols(b * hw, hw)? };
                    part.reshape(&shape)
                })
                .collect::<Result<_>>()?;
        }
        xs.iter()
            .map(|x| x.conv2d(ctx.param(self.out_kernel), Some(ctx.param(self.out_bias)), ConvSpec::pointwise()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub cfg: HeadConfig,
    /// `[C, 2C, 1, 1]`
    pub fuse_kernel: ParamId,
    pub fuse_bias: ParamId,
    pub cls: Tower,
    pub offset: Tower,
    pub size: Tower,
}

impl Head {
    pub fn new(init: &mut Init<'_>, cfg: &HeadConfig) -> Result<Self> {
        if cfg.width == 0 || cfg.depth == 0 {
            return Err(Error::Config("head width and depth must be positive".into()));
        }
        let c = cfg.embed_dim;
        let mut s = init.scope("head");
        Ok(Head {
            cfg: cfg.clone(),
            fuse_kernel: s.normal("fuse", &[c, 2 * c, 1, 1], 1.0 / ((2 * c) as f64).sqrt())?,
            fuse_bias: s.zeros("fuse_bias", &[c])?,
            cls: Tower::new(&mut s, "cls", cfg, 1, SCORE_PRIOR_BIAS)?,
            offset: Tower::new(&mut s, "offset", cfg, 2, 0.0)?,
            size: Tower::new(&mut s, "size", cfg, 2, 0.0)?,
        })
    }
}

fn square_side(tokens: usize, op: &'static str) -> Result<usize> {
    let side = (tokens as f64).sqrt().round() as usize;
    if tokens == 0 || side * side != tokens {
        return Err(Error::invalid(op, format!("{tokens} tokens do not form a square grid")));
    }
    Ok(side)
}

/// Channel-concatenates the two `[N_x, C]` responses, lays them out as a
/// `[2C, H_s, W_s]` grid and applies the pointwise fusion conv.
pub fn fuse<'a>(ctx: &Ctx<'a>, h_rgb: Var<'a>, h_tir: Var<'a>, head: &Head) -> Result<Var<'a>> {
    if h_rgb.shape() != h_tir.shape() {
        return Err(Error::shape("fuse", &h_rgb.shape(), &h_tir.shape()));
    }
    let (n, c) = h_rgb.dims2()?;
    let side = square_side(n, "fuse")?;
    let grid = Var::concat_cols(&[h_rgb, h_tir])?.transpose()?.reshape(&[2 * c, side, side])?;
    grid.conv2d(
        ctx.param(head.fuse_kernel),
        Some(ctx.param(head.fuse_bias)),
        ConvSpec::pointwise(),
    )
}

/// Score `[H, W]`, sub-cell offset `[2, H, W]` and size `[2, H, W]` maps,
/// all in `(0, 1)`.
pub struct HeadMaps<'a> {
    pub score: Var<'a>,
    /// Pre-sigmoid score, `[H, W]`.
    pub score_logits: Var<'a>,
    pub offset: Var<'a>,
    pub size: Var<'a>,
}

/// Runs the three towers over a batch of fused `[C, H, W]` grids.
pub fn predict_maps_batch<'a>(ctx: &Ctx<'a>, fused: &[Var<'a>], head: &Head) -> Result<Vec<HeadMaps<'a>>> {
    if fused.is_empty() {
        return Err(Error::invalid("predict_maps", "empty batch"));
    }
    let shape = fused[0].shape();
    if shape.len() != 3 || fused.iter().any(|f| f.shape() != shape) {
        return Err(Error::invalid("predict_maps", format!("expected equal [C, H, W] inputs, got {shape:?}")));
    }
    let cls = head.cls.forward(ctx, fused)?;
    let off = head.offset.forward(ctx, fused)?;
    let size = head.size.forward(ctx, fused)?;
    cls.into_iter()
        .zip(off)
        .zip(size)
        .map(|((c, o), s)| {
            let logits = c.reshape(&[shape[1], shape[2]])?;
            Ok(HeadMaps {
                score: logits.sigmoid(),
                score_logits: logits,
                offset: o.sigmoid(),
                size: s.sigmoid(),
            })
        })
        .collect()
}

pub fn predict_maps<'a>(ctx: &Ctx<'a>, fused: Var<'a>, head: &Head) -> Result<HeadMaps<'a>> {
    Ok(predict_maps_batch(ctx, &[fused], head)?.pop().expect("one map set"))
}

/// Smallest decoded side in pixels.
const MIN_SIDE: f64 = 1e-3;

/// Peak cell of `score` (ties to the lowest row-major index), shifted by the
/// sub-cell offset and sized as a fraction of the search side, clipped to
/// the `search_side x search_side` frame.
pub fn decode(score: &Tensor, offset: &Tensor, size: &Tensor, search_side: f64) -> Result<Detection> {
    let (h, w) = score.dims2()?;
    if offset.shape() != [2, h, w] || size.shape() != [2, h, w] {
        return Err(Error::shape("decode", score.shape(), offset.shape()));
    }
    let mut best = 0;
    for (i, &v) in score.data().iter().enumerate() {
        if v > score.data()[best] {
            best = i;
        }
    }
    let (i, j) = (best / w, best % w);
    let cell = search_side / w as f64;
    let cell_y = search_side / h as f64;
    let hw = h * w;
    let cx = (j as f64 + offset.data()[best]) * cell;
    let cy = (i as f64 + offset.data()[hw + best]) * cell_y;
    let bw = (size.data()[best] * search_side).max(MIN_SIDE);
    let bh = (size.data()[hw + best] * search_side).max(MIN_SIDE);
    let mut b = BBox::from_center(cx, cy, bw, bh).clip(search_side, search_side);
    // a center on the far edge would clip to zero width
    if b.w <= 0.0 {
        b.x = (search_side - MIN_SIDE).max(0.0);
        b.w = MIN_SIDE.min(search_side);
    }
    if b.h <= 0.0 {
        b.y = (search_side - MIN_SIDE).max(0.0);
        b.h = MIN_SIDE.min(search_side);
    }
    Ok(Detection {
        bbox: b,
        score: score.data()[best],
    })
}
