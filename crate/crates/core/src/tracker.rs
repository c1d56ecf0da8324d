//! Frame-by-frame tracking: cropping, the per-sequence state and the loop.

use crate::config::RunConfig;
use crate::dam::{CueState, Modality};
use crate::data::{Frame, Sequence};
use crate::error::{Error, Result};
use crate::head::{decode, BBox};
use crate::model::{forward_frame, FrameInputs, ModalityCrops, Model};
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::{DType, Tape, Tensor};

/// Smallest box side used to size crops, in pixels.
const MIN_CROP_BASIS: f64 = 4.0;
/// Pixel normalization `(v / 255 - MEAN) / STD`.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Maps crop pixels back to frame pixels: `frame = origin + crop * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    /// Frame pixels per crop pixel.
    pub scale: f64,
}

impl CropWindow {
    pub fn to_frame(&self, b: &BBox) -> BBox {
        BBox::new(self.x0 + b.x * self.scale, self.y0 + b.y * self.scale, b.w * self.scale, b.h * self.scale)
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x - self.x0) / self.scale,
            (b.y - self.y0) / self.scale,
            b.w / self.scale,
            b.h / self.scale,
        )
    }
}

/// Crop side in frame pixels for a box and a context factor.
pub fn crop_side(b: &BBox, factor: f64) -> f64 {
    factor * (b.w.max(MIN_CROP_BASIS) * b.h.max(MIN_CROP_BASIS)).sqrt()
}

/// Bilinear resample of the square `side` window centered at `center` to
/// `out x out`, normalized, as `[3, out, out]`. Gray frames are replicated
/// to three channels; pixels outside the frame take the frame's mean.
pub fn crop_region(frame: &Frame, center: (f64, f64), side: f64, out: usize, dtype: DType) -> (Tensor, CropWindow) {
    let scale = side / out as f64;
    let win = CropWindow {
        x0: center.0 - side / 2.0,
        y0: center.1 - side / 2.0,
        scale,
    };
    let (w, h, ch) = (frame.width, frame.height, frame.channels);
    let mut mean = vec![0.0; ch];
    for px in frame.data.chunks(ch) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= (w * h) as f64);
    let fetch = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            mean[c]
        } else {
            frame.data[(y as usize * w + x as usize) * ch + c] as f64
        }
    };
    let mut data = vec![0.0; 3 * out * out];
    for v in 0..out {
        let sy = win.y0 + (v as f64 + 0.5) * scale - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        for u in 0..out {
            let sx = win.x0 + (u as f64 + 0.5) * scale - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let (xi, yi) = (x0 as i64, y0 as i64);
            for c in 0..3 {
                let sc = if ch == 1 { 0 } else { c };
                let val = (1.0 - fy) * ((1.0 - fx) * fetch(xi, yi, sc) + fx * fetch(xi + 1, yi, sc))
                    + fy * ((1.0 - fx) * fetch(xi, yi + 1, sc) + fx * fetch(xi + 1, yi + 1, sc));
                data[(c * out + v) * out + u] = (val / 255.0 - PIXEL_MEAN) / PIXEL_STD;
            }
        }
    }
    let t = Tensor::new(&[3, out, out], data, dtype).expect("crop buffer matches its shape");
    (t, win)
}

/// Template crops of both modalities around `b`.
pub fn template_pair(cfg: &RunConfig, rgb: &Frame, tir: &Frame, b: &BBox) -> [Tensor; 2] {
    let side = crop_side(b, cfg.template_factor);
    let c = b.center();
    [
        crop_region(rgb, c, side, cfg.template_side, cfg.dtype).0,
        crop_region(tir, c, side, cfg.template_side, cfg.dtype).0,
    ]
}

/// Per-sequence tracker state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    /// Initial template per modality.
    pub z0: [Tensor; 2],
    /// Dynamic template per modality.
    pub zt: [Tensor; 2],
    /// Frame the dynamic template was cropped from, and its box there.
    pub zt_source: (usize, BBox),
    pub cue: CueState,
    pub last: BBox,
    /// Index of the most recently processed frame.
    pub frame: usize,
}

/// Diagnostics of one tracked frame.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
    /// `[H_s, W_s]`
    pub score_map: Tensor,
    /// `[H_s, W_s]` per modality.
    pub gate_maps: [Tensor; 2],
    pub selected: [Vec<usize>; 2],
    /// `[1, L]` per modality.
    pub router_scores: [Tensor; 2],
    /// `[H_t, W_t, 2]` per modality and template kind.
    pub offsets: [[Tensor; 2]; 2],
    pub template_updated: bool,
}

pub struct Tracker<'m> {
    model: &'m Model,
    store: &'m ParamStore,
    cfg: &'m RunConfig,
    state: TrackerState,
}

impl<'m> Tracker<'m> {
    /// Starts tracking from the annotated first frame.
    pub fn init(
        model: &'m Model,
        store: &'m ParamStore,
        cfg: &'m RunConfig,
        rgb: &Frame,
        tir: &Frame,
        bbox: BBox,
    ) -> Result<Self> {
        check_pair(rgb, tir)?;
        if !(bbox.w > 0.0 && bbox.h > 0.0) {
            return Err(Error::invalid("tracker", format!("initial box {bbox:?} is empty")));
        }
        let z0 = template_pair(cfg, rgb, tir, &bbox);
        Ok(Tracker {
            model,
            store,
            cfg,
            state: TrackerState {
                zt: z0.clone(),
                z0,
                zt_source: (0, bbox),
                cue: CueState::initial(store, &model.dam),
                last: bbox,
                frame: 0,
            },
        })
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    /// Tracks the next frame pair.
    pub fn step(&mut self, rgb: &Frame, tir: &Frame) -> Result<FrameResult> {
        check_pair(rgb, tir)?;
        let cfg = self.cfg;
        let frame_index = self.state.frame + 1;
        let side = crop_side(&self.state.last, cfg.search_factor);
        let center = self.state.last.center();
        let (search_rgb, win) = crop_region(rgb, center, side, cfg.search_side, cfg.dtype);
        let (search_tir, _) = crop_region(tir, center, side, cfg.search_side, cfg.dtype);
        let inputs = FrameInputs {
            rgb: ModalityCrops {
                z0: self.state.z0[0].clone(),
                zt: self.state.zt[0].clone(),
                search: search_rgb,
            },
            tir: ModalityCrops {
                z0: self.state.z0[1].clone(),
                zt: self.state.zt[1].clone(),
                search: search_tir,
            },
        };

        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, self.store, Mode::Eval);
        let cues = [
            ctx.constant(self.state.cue.cues[0].clone()),
            ctx.constant(self.state.cue.cues[1].clone()),
        ];
        let out = forward_frame(&ctx, self.model, &inputs, cues)?;
        let score_map = out.maps.score.value().as_ref().clone();
        let det = decode(
            &score_map,
            &out.maps.offset.value(),
            &out.maps.size.value(),
            cfg.search_side as f64,
        )?;
        let bbox = win
            .to_frame(&det.bbox)
            .clip(rgb.width as f64, rgb.height as f64);
        let bbox = if bbox.w > 0.0 && bbox.h > 0.0 { bbox } else { self.state.last };

        let (hs, ws) = score_map.dims2()?;
        let mut gate_maps = Vec::with_capacity(2);
        let mut next_cues = Vec::with_capacity(2);
        for m in Modality::BOTH {
            let tr = &out.traces[m.index()];
            gate_maps.push(tr.gate.value().reshape(&[hs, ws])?);
            next_cues.push(tr.next_cue.value().as_ref().clone());
        }
        let [tr_r, tr_t] = &out.traces;
        let result_offsets = [
            [tr_r.offsets[0].value().as_ref().clone(), tr_r.offsets[1].value().as_ref().clone()],
            [tr_t.offsets[0].value().as_ref().clone(), tr_t.offsets[1].value().as_ref().clone()],
        ];

        let due = cfg.update_interval.is_some_and(|u| frame_index % u == 0);
        let template_updated = due && det.score > cfg.update_threshold;
        if template_updated {
            self.state.zt = template_pair(cfg, rgb, tir, &bbox);
            self.state.zt_source = (frame_index, bbox);
        }
        let next_t = next_cues.pop().expect("two cues");
        let next_r = next_cues.pop().expect("two cues");
        self.state.cue = CueState {
            cues: [next_r, next_t],
            frame: frame_index,
        };
        self.state.last = bbox;
        self.state.frame = frame_index;

        let gate_t = gate_maps.pop().expect("two gates");
        let gate_r = gate_maps.pop().expect("two gates");
        Ok(FrameResult {
            frame: frame_index,
            bbox,
            score: det.score,
            score_map,
            gate_maps: [gate_r, gate_t],
            selected: [tr_r.selected.clone(), tr_t.selected.clone()],
            router_scores: [tr_r.router_scores.as_ref().clone(), tr_t.router_scores.as_ref().clone()],
            offsets: result_offsets,
            template_updated,
        })
    }
}

fn check_pair(rgb: &Frame, tir: &Frame) -> Result<()> {
    if rgb.width != tir.width || rgb.height != tir.height {
        return Err(Error::invalid(
            "tracker",
            format!(
                "RGB {}x{} and TIR {}x{} frames differ in size",
                rgb.width, rgb.height, tir.width, tir.height
            ),
        ));
    }
    Ok(())
}

/// Predicted boxes for every frame (the first is the annotation) plus the
/// diagnostics of frames `1..`.
#[derive(Clone, Debug)]
pub struct TrackResult {
    pub boxes: Vec<BBox>,
    pub frames: Vec<FrameResult>,
}

pub fn run_tracker(model: &Model, store: &ParamStore, cfg: &RunConfig, seq: &Sequence) -> Result<TrackResult> {
    if seq.is_empty() {
        return Err(Error::invalid("run_tracker", "empty sequence"));
    }
    let mut tracker = Tracker::init(model, store, cfg, &seq.rgb[0], &seq.tir[0], seq.gt[0])?;
    let mut boxes = vec![seq.gt[0]];
    let mut frames = Vec::with_capacity(seq.len() - 1);
    for i in 1..seq.len() {
        let r = tracker.step(&seq.rgb[i], &seq.tir[i])?;
        boxes.push(r.bbox);
        frames.push(r);
    }
    Ok(TrackResult { boxes, frames })
}

/// Plain-text box list, one `frame x y w h` line per frame.
pub fn boxes_to_text(boxes: &[BBox]) -> String {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| format!("{i} {} {} {} {}\n", b.x, b.y, b.w, b.h))
        .collect()
}
