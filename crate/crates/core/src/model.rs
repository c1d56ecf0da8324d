//! The full per-frame network: tokenization, trunk with interactions, layer
//! aggregation, template alignment with the cue, fusion and box head.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Segment};
use crate::cam::Cam;
use crate::config::RunConfig;
use crate::dam::{dam_forward, Dam, Modality};
use crate::error::{Error, Result};
use crate::head::{fuse, predict_maps_batch, Head, HeadMaps};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub cam: Cam,
    pub dam: Dam,
    pub head: Head,
}

impl Model {
    /// Builds the model, registering every parameter in `store`.
    pub fn new(init: &mut Init<'_>, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            backbone: Backbone::new(init, &cfg.backbone(), &cfg.mfi())?,
            cam: Cam::new(init, &cfg.cam())?,
            dam: Dam::new(init, &cfg.dam())?,
            head: Head::new(init, &cfg.head())?,
        })
    }

    /// A fresh parameter store and model seeded from `cfg.seed`.
    pub fn init(cfg: &RunConfig) -> Result<(ParamStore, Model)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(&mut Init::new(&mut store, &mut rng, cfg.dtype), cfg)?;
        Ok((store, model))
    }

    /// The same parameters with every cross-modal interaction bypassed.
    pub fn without_mfi(&self) -> Model {
        Model {
            backbone: self.backbone.without_mfi(),
            ..self.clone()
        }
    }
}

/// `[3, H, W]` crops for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityCrops {
    pub z0: Tensor,
    pub zt: Tensor,
    pub search: Tensor,
}

/// Crops of both modalities for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInputs {
    pub rgb: ModalityCrops,
    pub tir: ModalityCrops,
}

impl FrameInputs {
    pub fn modality(&self, m: Modality) -> &ModalityCrops {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Tir => &self.tir,
        }
    }
}

/// Per-modality intermediate results of one frame.
pub struct ModalityTrace<'a> {
    /// Aggregated features over the whole token sequence.
    pub aggregated: Var<'a>,
    pub selected: Vec<usize>,
    pub router_scores: Rc<Tensor>,
    /// `[N_x, 1]`
    pub gate: Var<'a>,
    pub response: Var<'a>,
    pub next_cue: Var<'a>,
    pub offsets: [Var<'a>; 2],
    pub sampled: Var<'a>,
}

pub struct FrameOutput<'a> {
    pub maps: HeadMaps<'a>,
    /// `[C, H_s, W_s]`
    pub fused: Var<'a>,
    /// Indexed by [`Modality::index`].
    pub traces: [ModalityTrace<'a>; 2],
}

/// Everything before the head for one frame.
pub struct FrameFeatures<'a> {
    pub fused: Var<'a>,
    pub traces: [ModalityTrace<'a>; 2],
}

/// Runs one frame up to the fused search grid. `cues[m]` is `C_m^t`.
pub fn frame_features<'a>(
    ctx: &Ctx<'a>,
    model: &Model,
    inputs: &FrameInputs,
    cues: [Var<'a>; 2],
) -> Result<FrameFeatures<'a>> {
    let bb = &model.backbone;
    let mut tokens = Vec::with_capacity(2);
    let mut layout = None;
    for m in Modality::BOTH {
        let crops = inputs.modality(m);
        let z0 = bb.patch.forward(ctx, &crops.z0, false)?;
        let zt = bb.patch.forward(ctx, &crops.zt, false)?;
        let x = bb.patch.forward(ctx, &crops.search, true)?;
        let (t, l) = bb.assemble(ctx, cues[m.index()], z0, zt, x)?;
        tokens.push(t);
        layout = Some(l);
    }
    let layout = layout.expect("two modalities");
    let feats = bb.forward(ctx, tokens[0], tokens[1])?;

    let agg_r = model.cam.forward(ctx, &feats.rgb)?;
    let agg_t = model.cam.forward(ctx, &feats.tir)?;
    let seg = |v: Var<'a>, s: Segment| layout.slice(v, s);
    let templates = [
        (seg(agg_r.features, Segment::InitialTemplate)?, seg(agg_r.features, Segment::DynamicTemplate)?),
        (seg(agg_t.features, Segment::InitialTemplate)?, seg(agg_t.features, Segment::DynamicTemplate)?),
    ];
    let search = [seg(agg_r.features, Segment::Search)?, seg(agg_t.features, Segment::Search)?];
    let [dam_r, dam_t] = dam_forward(ctx, &model.dam, templates, search, cues)?;
    let fused = fuse(ctx, dam_r.response.features, dam_t.response.features, &model.head)?;

    let trace = |agg: crate::cam::CamOutput<'a>, d: crate::dam::DamOutput<'a>| ModalityTrace {
        aggregated: agg.features,
        selected: agg.selected,
        router_scores: agg.scores,
        gate: d.response.gate,
        response: d.response.features,
        next_cue: d.next_cue,
        offsets: d.offsets,
        sampled: d.sampled,
    };
    Ok(FrameFeatures {
        fused,
        traces: [trace(agg_r, dam_r), trace(agg_t, dam_t)],
    })
}

/// Full forward of a batch of frames; head normalization statistics span
/// the batch in training mode.
pub fn forward_batch<'a>(
    ctx: &Ctx<'a>,
    model: &Model,
    batch: &[(FrameInputs, [Tensor; 2])],
) -> Result<Vec<FrameOutput<'a>>> {
    if batch.is_empty() {
        return Err(Error::invalid("forward", "empty batch"));
    }
    let mut feats = Vec::with_capacity(batch.len());
    for (inputs, cues) in batch {
        let cue_vars = [ctx.constant(cues[0].clone()), ctx.constant(cues[1].clone())];
        feats.push(frame_features(ctx, model, inputs, cue_vars)?);
    }
    let fused: Vec<Var<'a>> = feats.iter().map(|f| f.fused).collect();
    let maps = predict_maps_batch(ctx, &fused, &model.head)?;
    Ok(feats
        .into_iter()
        .zip(maps)
        .map(|(f, maps)| FrameOutput {
            maps,
            fused: f.fused,
            traces: f.traces,
        })
        .collect())
}

/// Full forward of one frame with the cue bound as given.
pub fn forward_frame<'a>(
    ctx: &Ctx<'a>,
    model: &Model,
    inputs: &FrameInputs,
    cues: [Var<'a>; 2],
) -> Result<FrameOutput<'a>> {
    let f = frame_features(ctx, model, inputs, cues)?;
    let maps = predict_maps_batch(ctx, &[f.fused], &model.head)?
        .pop()
        .expect("one map set");
    Ok(FrameOutput {
        maps,
        fused: f.fused,
        traces: f.traces,
    })
}
