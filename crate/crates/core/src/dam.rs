//! Deformable template alignment and the temporal cue.
//!
//! The two template feature grids of a modality are mixed by a small conv
//! block, per-template offset heads predict a deformation field, templates
//! are resampled bilinearly along it, and the sampled features update a
//! recurrent cue that finally gates the search-region features.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Ffn, Linear};
use crate::params::{Ctx, Init, ParamId};
use crate::tensor::{ConvSpec, DType, Tensor, Var};

/// Source of the keys for the cue update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueKeys {
    /// Each modality's cue attends to its own sampled templates.
    #[default]
    SameModality,
    /// Each modality's cue attends to the other modality's sampled templates.
    OtherModality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DamConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub cue_count: usize,
    /// Offset magnitude `v`, in grid cells.
    pub offset_scale: f64,
    pub ffn_ratio: usize,
    pub cue_keys: CueKeys,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Tir,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::Tir];

    pub fn index(self) -> usize {
        match self {
            Modality::Rgb => 0,
            Modality::Tir => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Tir => "tir",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Rgb => Modality::Tir,
            Modality::Tir => Modality::Rgb,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateKind {
    Initial,
    Dynamic,
}

impl TemplateKind {
    pub fn index(self) -> usize {
        match self {
            TemplateKind::Initial => 0,
            TemplateKind::Dynamic => 1,
        }
    }
}

/// Depthwise 3x3 then pointwise 2C -> C, GELU after each.
#[derive(Clone, Debug)]
pub struct ConvMixer {
    /// `[2C, 1, 3, 3]`
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    /// `[C, 2C, 1, 1]`
    pub pointwise: ParamId,
    pub pointwise_bias: ParamId,
}

impl ConvMixer {
    pub fn new(init: &mut Init<'_>, dim: usize) -> Result<Self> {
        let mut s = init.scope("mixer");
        Ok(ConvMixer {
            depthwise: s.normal("depthwise", &[2 * dim, 1, 3, 3], 1.0 / 3.0)?,
            depthwise_bias: s.zeros("depthwise_bias", &[2 * dim])?,
            pointwise: s.normal("pointwise", &[dim, 2 * dim, 1, 1], 1.0 / ((2 * dim) as f64).sqrt())?,
            pointwise_bias: s.zeros("pointwise_bias", &[dim])?,
        })
    }
}

/// Cell coordinates `(x, y) = (j, i)` of every grid cell, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceGrid {
    pub height: usize,
    pub width: usize,
    /// `[H, W, 2]`
    pub points: Tensor,
}

impl ReferenceGrid {
    pub fn new(height: usize, width: usize, dtype: DType) -> Self {
        let data = (0..height)
            .flat_map(|i| (0..width).flat_map(move |j| [j as f64, i as f64]))
            .collect();
        ReferenceGrid {
            height,
            width,
            points: Tensor::from_parts(vec![height, width, 2], data, dtype),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dam {
    pub cfg: DamConfig,
    pub mixer: ConvMixer,
    /// Zero-initialized `C -> 2` heads indexed `[modality][template]`.
    pub offset_heads: [[Linear; 2]; 2],
    pub cue_attn: Attention,
    pub refine_attn: Attention,
    pub ffn: Ffn,
    /// Learnable starting cue per modality, `[N_K, C]`.
    pub cue_init: [ParamId; 2],
}

impl Dam {
    pub fn new(init: &mut Init<'_>, cfg: &DamConfig) -> Result<Self> {
        if cfg.cue_count == 0 {
            return Err(Error::Config("cue_count must be at least 1".into()));
        }
        if !(cfg.offset_scale.is_finite() && cfg.offset_scale >= 0.0) {
            return Err(Error::Config(format!("offset_scale must be finite and >= 0, got {}", cfg.offset_scale)));
        }
        let c = cfg.embed_dim;
        let mut s = init.scope("dam");
        let mixer = ConvMixer::new(&mut s, c)?;
        let mut head = |m: Modality, t: &str| Linear::zeros(&mut s, &format!("offset_{}_{t}", m.name()), c, 2, true);
        let offset_heads = [
            [head(Modality::Rgb, "z0")?, head(Modality::Rgb, "zt")?],
            [head(Modality::Tir, "z0")?, head(Modality::Tir, "zt")?],
        ];
        Ok(Dam {
            cfg: cfg.clone(),
            mixer,
            offset_heads,
            cue_attn: Attention::new(&mut s, "cue_attn", c, cfg.heads, true)?,
            refine_attn: Attention::new(&mut s, "refine_attn", c, cfg.heads, true)?,
            ffn: Ffn::new(&mut s, "ffn", c, cfg.ffn_ratio, false)?,
            cue_init: [
                s.normal("cue_init_rgb", &[cfg.cue_count, c], 0.02)?,
                s.normal("cue_init_tir", &[cfg.cue_count, c], 0.02)?,
            ],
        })
    }

    pub fn offset_head(&self, modality: Modality, kind: TemplateKind) -> &Linear {
        &self.offset_heads[modality.index()][kind.index()]
    }
}

fn grid_side(tokens: usize) -> Result<usize> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens || tokens == 0 {
        return Err(Error::invalid(
            "reshape_templates",
            format!("{tokens} tokens do not form a square grid"),
        ));
    }
    Ok(side)
}

/// Raster-ordered `[N_z, C]` tokens to `[H_t, W_t, C]` grids.
pub fn reshape_templates<'a>(z0: Var<'a>, zt: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
    if z0.shape() != zt.shape() {
        return Err(Error::shape("reshape_templates", &z0.shape(), &zt.shape()));
    }
    let (n, c) = z0.dims2()?;
    let side = grid_side(n)?;
    Ok((z0.reshape(&[side, side, c])?, zt.reshape(&[side, side, c])?))
}

/// `F_A = gelu(pw(gelu(dw([z0 | zt]))))` on `[H, W, C]` grids.
pub fn conv_mixer<'a>(ctx: &Ctx<'a>, z0: Var<'a>, zt: Var<'a>, mixer: &ConvMixer) -> Result<Var<'a>> {
    if z0.shape() != zt.shape() || z0.shape().len() != 3 {
        return Err(Error::shape("conv_mixer", &z0.shape(), &zt.shape()));
    }
    let (h, w, c) = (z0.shape()[0], z0.shape()[1], z0.shape()[2]);
    let joined = Var::concat_cols(&[z0.reshape(&[h * w, c])?, zt.reshape(&[h * w, c])?])?;
    let chw = joined.transpose()?.reshape(&[2 * c, h, w])?;
    let dw = chw
        .conv2d(
            ctx.param(mixer.depthwise),
            Some(ctx.param(mixer.depthwise_bias)),
            ConvSpec::depthwise(1),
        )?
        .gelu();
    let pw = dw
        .conv2d(
            ctx.param(mixer.pointwise),
            Some(ctx.param(mixer.pointwise_bias)),
            ConvSpec::pointwise(),
        )?
        .gelu();
    pw.reshape(&[c, h * w])?.transpose()?.reshape(&[h, w, c])
}

/// `v * head(F_A)` as an `[H, W, 2]` field of `(dx, dy)` in cell units.
pub fn predict_offsets<'a>(ctx: &Ctx<'a>, f_a: Var<'a>, head: &Linear, scale: f64) -> Result<Var<'a>> {
    let shape = f_a.shape();
    if shape.len() != 3 {
        return Err(Error::invalid("predict_offsets", format!("expected [H, W, C], got {shape:?}")));
    }
    let flat = f_a.reshape(&[shape[0] * shape[1], shape[2]])?;
    head.forward(ctx, flat)?.scale(scale).reshape(&[shape[0], shape[1], 2])
}

/// Bilinear samples of `grid` at `refs + offsets`, as `[H*W, C]` tokens.
pub fn deform_sample<'a>(ctx: &Ctx<'a>, grid: Var<'a>, refs: &ReferenceGrid, offsets: Var<'a>) -> Result<Var<'a>> {
    let shape = grid.shape();
    if shape.len() != 3 || shape[0] != refs.height || shape[1] != refs.width {
        return Err(Error::shape("deform_sample", &shape, refs.points.shape()));
    }
    if offsets.shape() != refs.points.shape() {
        return Err(Error::shape("deform_sample", &offsets.shape(), refs.points.shape()));
    }
    let n = refs.height * refs.width;
    let points = ctx.constant(refs.points.clone()).add(offsets)?.reshape(&[n, 2])?;
    grid.bilinear_sample(points)
}

/// Per-modality cue carried across frames.
#[derive(Clone, Debug, PartialEq)]
pub struct CueState {
    /// `[N_K, C]` per modality, indexed by [`Modality::index`].
    pub cues: [Tensor; 2],
    pub frame: usize,
}

impl CueState {
    pub fn initial(store: &crate::params::ParamStore, dam: &Dam) -> Self {
        CueState {
            cues: [store.get(dam.cue_init[0]).clone(), store.get(dam.cue_init[1]).clone()],
            frame: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cues.iter().all(Tensor::all_finite)
    }
}

/// `C^{t+1} = C^t + attn(C^t, F_S)`. Returns the new cue with the per-head
/// attention weights.
pub fn propagate_cue<'a>(
    ctx: &Ctx<'a>,
    cue: Var<'a>,
    f_s: Var<'a>,
    attn: &Attention,
) -> Result<(Var<'a>, Vec<Rc<Tensor>>)> {
    let out = attn.forward(ctx, cue, f_s)?;
    Ok((cue.add(out.out)?, out.weights))
}

/// Search response and its per-token gate.
pub struct Response<'a> {
    /// `[N_x, C]`
    pub features: Var<'a>,
    /// `[N_x, 1]`
    pub gate: Var<'a>,
}

/// Refines the cue against the search features, then gates them:
/// `C^ = C + attn(C, F)`, `C~ = C^ + ffn(C^)`,
/// `g = mean_k (F C~^T)_k / sqrt(C)`, `H = g * F`.
pub fn refine_and_respond<'a>(ctx: &Ctx<'a>, cue: Var<'a>, search: Var<'a>, dam: &Dam) -> Result<Response<'a>> {
    let refined = cue.add(dam.refine_attn.forward(ctx, cue, search)?.out)?;
    let enhanced = refined.add(dam.ffn.forward(ctx, refined)?)?;
    gate_search(ctx, enhanced, search)
}

/// `g = mean_k (F C~^T)_k / sqrt(C)` and `H = g * F`.
pub fn gate_search<'a>(ctx: &Ctx<'a>, cue: Var<'a>, search: Var<'a>) -> Result<Response<'a>> {
    let (nk, c) = cue.dims2()?;
    let (_, sc) = search.dims2()?;
    if sc != c {
        return Err(Error::shape("refine_and_respond", &cue.shape(), &search.shape()));
    }
    let scores = search.matmul(cue.transpose()?)?;
    let gate = if nk == 1 {
        scores
    } else {
        scores.matmul(ctx.constant(Tensor::full(&[nk, 1], 1.0 / nk as f64, cue.dtype())))?
    }
    .scale(1.0 / (c as f64).sqrt());
    Ok(Response {
        features: search.mul_col(gate)?,
        gate,
    })
}

/// Everything one modality's DAM pass produces.
pub struct DamOutput<'a> {
    pub response: Response<'a>,
    pub next_cue: Var<'a>,
    /// `[H, W, 2]` per template kind.
    pub offsets: [Var<'a>; 2],
    /// `[2 N_z, C]`: sampled initial then dynamic template tokens.
    pub sampled: Var<'a>,
}

/// Template features of one modality, mixed and resampled.
pub fn sample_templates<'a>(
    ctx: &Ctx<'a>,
    dam: &Dam,
    modality: Modality,
    z0: Var<'a>,
    zt: Var<'a>,
) -> Result<(Var<'a>, [Var<'a>; 2])> {
    let (g0, gt) = reshape_templates(z0, zt)?;
    let shape = g0.shape();
    let refs = ReferenceGrid::new(shape[0], shape[1], z0.dtype());
    let f_a = conv_mixer(ctx, g0, gt, &dam.mixer)?;
    let off0 = predict_offsets(ctx, f_a, dam.offset_head(modality, TemplateKind::Initial), dam.cfg.offset_scale)?;
    let offt = predict_offsets(ctx, f_a, dam.offset_head(modality, TemplateKind::Dynamic), dam.cfg.offset_scale)?;
    let s0 = deform_sample(ctx, g0, &refs, off0)?;
    let st = deform_sample(ctx, gt, &refs, offt)?;
    Ok((Var::concat_rows(&[s0, st])?, [off0, offt]))
}

/// Full DAM pass for both modalities. `templates[m] = (z0, zt)` token slices,
/// `search[m]` the aggregated search tokens, `cues[m]` the current cue.
pub fn dam_forward<'a>(
    ctx: &Ctx<'a>,
    dam: &Dam,
    templates: [(Var<'a>, Var<'a>); 2],
    search: [Var<'a>; 2],
    cues: [Var<'a>; 2],
) -> Result<[DamOutput<'a>; 2]> {
    let mut sampled = Vec::with_capacity(2);
    for m in Modality::BOTH {
        let (z0, zt) = templates[m.index()];
        sampled.push(sample_templates(ctx, dam, m, z0, zt)?);
    }
    let mut outs = Vec::with_capacity(2);
    for m in Modality::BOTH {
        let keys = match dam.cfg.cue_keys {
            CueKeys::SameModality => sampled[m.index()].0,
            CueKeys::OtherModality => sampled[m.other().index()].0,
        };
        let (next_cue, _) = propagate_cue(ctx, cues[m.index()], keys, &dam.cue_attn)?;
        let response = refine_and_respond(ctx, next_cue, search[m.index()], dam)?;
        outs.push(DamOutput {
            response,
            next_cue,
            offsets: sampled[m.index()].1,
            sampled: sampled[m.index()].0,
        });
    }
    let tir = outs.pop().expect("two modalities");
    let rgb = outs.pop().expect("two modalities");
    Ok([rgb, tir])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Mode, ParamStore};
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DamConfig {
        DamConfig {
            embed_dim: 8,
            heads: 2,
            cue_count: 1,
            offset_scale: 5.0,
            ffn_ratio: 4,
            cue_keys: CueKeys::SameModality,
        }
    }

    fn build() -> (ParamStore, Dam) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dam = Dam::new(&mut Init::new(&mut store, &mut rng, DType::F64), &cfg()).unwrap();
        (store, dam)
    }

    #[test]
    fn reference_grid_is_integer_cells() {
        let g = ReferenceGrid::new(3, 4, DType::F32);
        assert_eq!(g.points.shape(), &[3, 4, 2]);
        assert_eq!(g.points.at(&[2, 1, 0]), 1.0);
        assert_eq!(g.points.at(&[2, 1, 1]), 2.0);
    }

    #[test]
    fn reshape_is_raster_and_round_trips() {
        let tape = Tape::inference();
        let t = Tensor::new(&[64, 2], (0..128).map(f64::from).collect(), DType::F64).unwrap();
        let v = tape.constant(t.clone());
        let (g, _) = reshape_templates(v, v).unwrap();
        assert_eq!(g.shape(), vec![8, 8, 2]);
        assert_eq!(g.value().at(&[1, 0, 0]), t.at(&[8, 0]));
        assert!(g.reshape(&[64, 2]).unwrap().value().bit_eq(&t));
        let odd = tape.constant(Tensor::zeros(&[10, 2], DType::F64));
        assert!(reshape_templates(odd, odd).is_err());
    }

    #[test]
    fn zero_mixer_weights_give_zero() {
        let (mut store, dam) = build();
        for id in [dam.mixer.depthwise, dam.mixer.pointwise] {
            store.get_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let a = ctx.constant(Tensor::randn(&[4, 4, 8], 1.0, DType::F64, &mut rng));
        let b = ctx.constant(Tensor::randn(&[4, 4, 8], 1.0, DType::F64, &mut rng));
        let f = conv_mixer(&ctx, a, b, &dam.mixer).unwrap();
        assert_eq!(f.shape(), vec![4, 4, 8]);
        assert!(f.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_heads_give_zero_offsets_and_linear_scaling() {
        let (mut store, dam) = build();
        let head = dam.offset_head(Modality::Tir, TemplateKind::Dynamic).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fa = Tensor::randn(&[4, 4, 8], 1.0, DType::F64, &mut rng);
        let run = |store: &ParamStore| {
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, store, Mode::Eval);
            predict_offsets(&ctx, ctx.constant(fa.clone()), &head, 5.0)
                .unwrap()
                .value()
                .as_ref()
                .clone()
        };
        assert!(run(&store).data().iter().all(|&v| v == 0.0));
        *store.get_mut(head.weight) = Tensor::randn(&[8, 2], 1.0, DType::F64, &mut rng);
        let base = run(&store);
        assert_eq!(base.shape(), &[4, 4, 2]);
        let w = store.get(head.weight).scale(3.0);
        *store.get_mut(head.weight) = w;
        for (a, b) in run(&store).data().iter().zip(base.data()) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_offsets_return_grid_and_unit_shift_returns_neighbor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid_t = Tensor::randn(&[5, 5, 3], 1.0, DType::F32, &mut rng);
        let refs = ReferenceGrid::new(5, 5, DType::F32);
        let store = ParamStore::new();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let grid = ctx.constant(grid_t.clone());
        let zero = ctx.constant(Tensor::zeros(&[5, 5, 2], DType::F32));
        let out = deform_sample(&ctx, grid, &refs, zero).unwrap().value();
        assert!(out.bit_eq(&grid_t.reshape(&[25, 3]).unwrap()));
        let shift: Vec<f64> = (0..25).flat_map(|_| [1.0, 0.0]).collect();
        let shift = ctx.constant(Tensor::new(&[5, 5, 2], shift, DType::F32).unwrap());
        let out = deform_sample(&ctx, grid, &refs, shift).unwrap().value();
        for i in 0..5 {
            for j in 0..4 {
                for c in 0..3 {
                    assert_eq!(out.at(&[i * 5 + j, c]), grid_t.at(&[i, j + 1, c]));
                }
            }
        }
    }

    #[test]
    fn zero_output_projection_keeps_cue() {
        let (store, dam) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let cue_t = Tensor::randn(&[1, 8], 1.0, DType::F64, &mut rng);
        let fs = ctx.constant(Tensor::randn(&[32, 8], 1.0, DType::F64, &mut rng));
        let (next, weights) = propagate_cue(&ctx, ctx.constant(cue_t.clone()), fs, &dam.cue_attn).unwrap();
        assert!(next.value().bit_eq(&cue_t));
        for w in weights {
            assert_eq!(w.shape(), &[1, 32]);
            assert!((w.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_cue_annihilates_response() {
        let store = ParamStore::new();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let cue = ctx.constant(Tensor::new(&[1, 4], vec![0.0, 0.0, 1.0, 0.0], DType::F64).unwrap());
        let mut s = vec![0.0; 6 * 4];
        for t in 0..6 {
            s[t * 4] = t as f64 + 1.0;
            s[t * 4 + 1] = -2.0;
        }
        let search = ctx.constant(Tensor::new(&[6, 4], s, DType::F64).unwrap());
        let r = gate_search(&ctx, cue, search).unwrap();
        assert_eq!(r.gate.shape(), vec![6, 1]);
        assert_eq!(r.features.shape(), vec![6, 4]);
        assert!(r.features.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_is_linear_and_response_quadratic_in_search() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cue = Tensor::randn(&[2, 4], 1.0, DType::F64, &mut rng);
        let search = Tensor::randn(&[6, 4], 1.0, DType::F64, &mut rng);
        let run = |alpha: f64| {
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &store, Mode::Eval);
            let r = gate_search(&ctx, ctx.constant(cue.clone()), ctx.constant(search.scale(alpha))).unwrap();
            (r.gate.value().as_ref().clone(), r.features.value().as_ref().clone())
        };
        let (g1, h1) = run(1.0);
        let (g2, h2) = run(2.5);
        for (a, b) in g2.data().iter().zip(g1.data()) {
            assert!((a - 2.5 * b).abs() < 1e-12);
        }
        for (a, b) in h2.data().iter().zip(h1.data()) {
            assert!((a - 6.25 * b).abs() < 1e-10);
        }
    }

    #[test]
    fn full_pass_shapes_and_identity_chain() {
        let (store, dam) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let mk = |n: usize, rng: &mut ChaCha8Rng| ctx.constant(Tensor::randn(&[n, 8], 1.0, DType::F64, rng));
        let templates = [(mk(16, &mut rng), mk(16, &mut rng)), (mk(16, &mut rng), mk(16, &mut rng))];
        let search = [mk(64, &mut rng), mk(64, &mut rng)];
        let state = CueState::initial(&store, &dam);
        let cues = [ctx.constant(state.cues[0].clone()), ctx.constant(state.cues[1].clone())];
        let outs = dam_forward(&ctx, &dam, templates, search, cues).unwrap();
        for (m, out) in outs.iter().enumerate() {
            assert!(out.next_cue.value().bit_eq(&state.cues[m]));
            let (z0, zt) = templates[m];
            let expected = Var::concat_rows(&[z0, zt]).unwrap().value();
            assert!(out.sampled.value().bit_eq(&expected));
            assert_eq!(out.response.features.shape(), vec![64, 8]);
            assert_eq!(out.offsets[0].shape(), vec![4, 4, 2]);
        }
    }
}
