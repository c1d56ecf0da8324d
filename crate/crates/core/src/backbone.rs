//! Patch tokenization, segment assembly and the Transformer trunk.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfi::{Mfi, MfiConfig};
use crate::nn::{Attention, Ffn, LayerNorm, Linear};
use crate::params::{Ctx, Init, ParamId};
use crate::tensor::{DType, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub template_side: usize,
    pub search_side: usize,
    /// 1-based layer indices followed by a cross-modal interaction.
    pub mfi_layers: Vec<usize>,
    pub cue_count: usize,
    pub ffn_ratio: usize,
    /// One trunk for both modalities when set, otherwise one per modality.
    pub shared_trunk: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.embed_dim == 0 || self.depth == 0 || self.heads == 0 {
            return bad("patch_size, embed_dim, depth and heads must be positive".into());
        }
        if self.template_side % self.patch_size != 0 || self.search_side % self.patch_size != 0 {
            return bad(format!(
                "template_side {} and search_side {} must be divisible by patch_size {}",
                self.template_side, self.search_side, self.patch_size
            ));
        }
        if self.template_side == 0 || self.search_side == 0 {
            return bad("image sides must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.mfi_layers.iter().any(|&l| l == 0 || l > self.depth) {
            return bad(format!("mfi_layers {:?} outside 1..={}", self.mfi_layers, self.depth));
        }
        if self.mfi_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("mfi_layers {:?} must be strictly ascending", self.mfi_layers));
        }
        if self.cue_count == 0 {
            return bad("cue_count must be at least 1".into());
        }
        Ok(())
    }

    /// Tokens per template, `(H_z / P)^2`.
    pub fn template_tokens(&self) -> usize {
        let s = self.template_side / self.patch_size;
        s * s
    }

    /// Tokens per search region, `(H_x / P)^2`.
    pub fn search_tokens(&self) -> usize {
        let s = self.search_side / self.patch_size;
        s * s
    }

    pub fn template_grid(&self) -> usize {
        self.template_side / self.patch_size
    }

    pub fn search_grid(&self) -> usize {
        self.search_side / self.patch_size
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.cue_count, self.template_tokens(), self.search_tokens())
    }
}

/// Segment boundaries of `[cue; z0; zt; search]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub cue: Range<usize>,
    pub z0: Range<usize>,
    pub zt: Range<usize>,
    pub search: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Cue,
    InitialTemplate,
    DynamicTemplate,
    Search,
}

impl TokenLayout {
    pub fn new(cue: usize, template: usize, search: usize) -> Self {
        let z0 = cue..cue + template;
        let zt = z0.end..z0.end + template;
        let s = zt.end..zt.end + search;
        TokenLayout {
            cue: 0..cue,
            z0,
            zt,
            search: s,
        }
    }

    pub fn total(&self) -> usize {
        self.search.end
    }

    pub fn range(&self, seg: Segment) -> Range<usize> {
        match seg {
            Segment::Cue => self.cue.clone(),
            Segment::InitialTemplate => self.z0.clone(),
            Segment::DynamicTemplate => self.zt.clone(),
            Segment::Search => self.search.clone(),
        }
    }

    pub fn slice<'a>(&self, tokens: Var<'a>, seg: Segment) -> Result<Var<'a>> {
        let r = self.range(seg);
        tokens.slice_rows(r.start, r.len())
    }
}

/// Concatenates the four segments in order `[cue; z0; zt; search]`.
pub fn assemble_tokens<'a>(cue: Var<'a>, z0: Var<'a>, zt: Var<'a>, search: Var<'a>) -> Result<(Var<'a>, TokenLayout)> {
    let (nk, c) = cue.dims2()?;
    for part in [z0, zt, search] {
        let (_, pc) = part.dims2()?;
        if pc != c {
            return Err(Error::shape("assemble_tokens", &cue.shape(), &part.shape()));
        }
    }
    let (nz, _) = z0.dims2()?;
    let (nz2, _) = zt.dims2()?;
    if nz != nz2 {
        return Err(Error::shape("assemble_tokens", &z0.shape(), &zt.shape()));
    }
    let (nx, _) = search.dims2()?;
    let tokens = Var::concat_rows(&[cue, z0, zt, search])?;
    Ok((tokens, TokenLayout::new(nk, nz, nx)))
}

/// Splits a `[3, H, W]` image into raster-ordered `P x P` patches, each
/// flattened channel-major: `[(H/P)(W/P), 3 P^2]`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(
            "patch_embed",
            format!("image {h}x{w} is not divisible into {patch}x{patch} patches"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(&[gh * gw, dim], out, image.dtype())
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, cfg: &BackboneConfig) -> Result<Self> {
        let mut s = init.scope("patch_embed");
        let c = cfg.embed_dim;
        let d_in = 3 * cfg.patch_size * cfg.patch_size;
        Ok(PatchEmbed {
            proj: Linear::new(&mut s, "proj", d_in, c, true)?,
            pos_template: s.normal("pos_template", &[cfg.template_tokens(), c], 0.02)?,
            pos_search: s.normal("pos_search", &[cfg.search_tokens(), c], 0.02)?,
            patch: cfg.patch_size,
        })
    }

    /// Tokenizes a template (`search == false`) or search-region image.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, image: &Tensor, search: bool) -> Result<Var<'a>> {
        let patches = ctx.constant(patchify(image, self.patch)?);
        let tokens = self.proj.forward(ctx, patches)?;
        let pos = ctx.param(if search { self.pos_search } else { self.pos_template });
        if tokens.shape() != pos.shape() {
            return Err(Error::shape("patch_embed", &tokens.shape(), &pos.shape()));
        }
        tokens.add(pos)
    }
}

/// Pre-norm Transformer block.
#[derive(Clone, Debug)]
pub struct VitBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl VitBlock {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, ffn_ratio: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(VitBlock {
            norm1: LayerNorm::new(&mut s, "norm1", dim)?,
            attn: Attention::new(&mut s, "attn", dim, heads, false)?,
            norm2: LayerNorm::new(&mut s, "norm2", dim)?,
            ffn: Ffn::new(&mut s, "ffn", dim, ffn_ratio, false)?,
        })
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        Ok(self.forward_with_attention(ctx, x)?.0)
    }

    pub fn forward_with_attention<'a>(
        &self,
        ctx: &Ctx<'a>,
        x: Var<'a>,
    ) -> Result<(Var<'a>, Vec<std::rc::Rc<Tensor>>)> {
        let h = self.norm1.forward(ctx, x)?;
        let attn = self.attn.forward(ctx, h, h)?;
        let x = x.add(attn.out)?;
        let h = self.norm2.forward(ctx, x)?;
        let x = x.add(self.ffn.forward(ctx, h)?)?;
        Ok((x, attn.weights))
    }
}

/// Features retained after every layer, per modality.
pub struct LayerFeatures<'a> {
    pub rgb: Vec<Var<'a>>,
    pub tir: Vec<Var<'a>>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch: PatchEmbed,
    pub cue_pos: ParamId,
    /// One trunk when shared, otherwise `[rgb, tir]`.
    pub trunks: Vec<Vec<VitBlock>>,
    /// Interaction modules keyed by the 1-based layer they follow.
    pub mfi: Vec<(usize, Mfi)>,
}

impl Backbone {
    pub fn new(init: &mut Init<'_>, cfg: &BackboneConfig, mfi_cfg: &MfiConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = init.scope("backbone");
        let patch = PatchEmbed::new(&mut s, cfg)?;
        let cue_pos = s.normal("cue_pos", &[cfg.cue_count, cfg.embed_dim], 0.02)?;
        let n_trunks = if cfg.shared_trunk { 1 } else { 2 };
        let mut trunks = Vec::with_capacity(n_trunks);
        for t in 0..n_trunks {
            let mut ts = s.scope(&format!("trunk{t}"));
            let blocks = (1..=cfg.depth)
                .map(|l| VitBlock::new(&mut ts, &format!("block{l}"), cfg.embed_dim, cfg.heads, cfg.ffn_ratio))
                .collect::<Result<Vec<_>>>()?;
            trunks.push(blocks);
        }
        let mfi = cfg
            .mfi_layers
            .iter()
            .map(|&l| Ok((l, Mfi::new(&mut s.scope(&format!("mfi{l}")), mfi_cfg)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            cfg: cfg.clone(),
            patch,
            cue_pos,
            trunks,
            mfi,
        })
    }

    /// The same trunk with every interaction removed.
    pub fn without_mfi(&self) -> Backbone {
        Backbone {
            mfi: Vec::new(),
            ..self.clone()
        }
    }

    fn block(&self, modality: usize, layer: usize) -> &VitBlock {
        let t = if self.trunks.len() == 1 { 0 } else { modality };
        &self.trunks[t][layer]
    }

    /// Adds the cue position embedding and assembles one modality's sequence.
    pub fn assemble<'a>(
        &self,
        ctx: &Ctx<'a>,
        cue: Var<'a>,
        z0: Var<'a>,
        zt: Var<'a>,
        search: Var<'a>,
    ) -> Result<(Var<'a>, TokenLayout)> {
        let cue = cue.add(ctx.param(self.cue_pos))?;
        assemble_tokens(cue, z0, zt, search)
    }

    /// Runs both modality streams through the trunk, applying the
    /// cross-modal interaction right after each configured layer.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, tokens_rgb: Var<'a>, tokens_tir: Var<'a>) -> Result<LayerFeatures<'a>> {
        if tokens_rgb.shape() != tokens_tir.shape() {
            return Err(Error::shape("forward_backbone", &tokens_rgb.shape(), &tokens_tir.shape()));
        }
        let mut r = tokens_rgb;
        let mut t = tokens_tir;
        let mut feats = LayerFeatures {
            rgb: Vec::with_capacity(self.cfg.depth),
            tir: Vec::with_capacity(self.cfg.depth),
        };
        for layer in 0..self.cfg.depth {
            r = self.block(0, layer).forward(ctx, r)?;
            t = self.block(1, layer).forward(ctx, t)?;
            if let Some((_, mfi)) = self.mfi.iter().find(|(l, _)| *l == layer + 1) {
                (r, t) = mfi.forward(ctx, r, t)?;
            }
            feats.rgb.push(r);
            feats.tir.push(t);
        }
        Ok(feats)
    }
}

/// Random `[3, side, side]` image, handy for tests and benchmarks.
pub fn random_image<R: rand::Rng + ?Sized>(side: usize, dtype: DType, rng: &mut R) -> Tensor {
    Tensor::randn(&[3, side, side], 1.0, dtype, rng)
}
