//! Overfitting loop: fits the full network to one sequence's ground-truth
//! crops to show the architecture can learn a tracking signal.
//!
//! Each step draws `batch_size` frames. The search crop is centered on the
//! jittered ground truth; the dynamic template is either the initial one or a
//! crop of an earlier frame. The loss is a penalty-reduced focal loss on the
//! score map against a Gaussian bump at the ground-truth cell, plus L1 and
//! generalized IoU on the box read out at that cell.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{OptimizerKind, Profile, RunConfig};
use crate::dam::CueState;
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::head::{predict_maps_batch, BBox, HeadMaps};
use crate::metrics::{eval_metrics, Metrics};
use crate::model::{frame_features, FrameInputs, ModalityCrops, Model};
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::tracker::{crop_region, crop_side, run_tracker, template_pair, TrackResult};
use crate::weights::save_weights;

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const L1_WEIGHT: f64 = 5.0;
pub const GIOU_WEIGHT: f64 = 2.0;
/// Heatmap spread in score-map cells.
pub const HEATMAP_SIGMA: f64 = 1.0;
/// Search-center jitter as a fraction of the search crop side.
pub const CENTER_JITTER: f64 = 0.15;
/// Log-scale jitter bound of the search crop side.
pub const SCALE_JITTER: f64 = 0.15;
/// Probability that a sample's dynamic template is the initial template.
pub const STATIC_TEMPLATE_PROB: f64 = 0.5;
/// The learning rate decays along a half cosine to this fraction.
pub const FINAL_LR_FRACTION: f64 = 0.1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Regression target of one sample in normalized search-crop units.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    /// Score-map cell `(row, col)` containing the box center.
    pub cell: (usize, usize),
    /// Box `(cx, cy, w, h)` divided by the search side.
    pub bbox: [f64; 4],
    /// `[H_s, W_s]`, exactly 1 at `cell`.
    pub heatmap: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frame: usize,
    pub inputs: FrameInputs,
    pub target: Target,
}

/// Loss terms of one step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub learning_rate: f64,
}

pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    /// Tracking run over the training sequence with the final weights.
    pub track: TrackResult,
    pub metrics: Metrics,
    /// Initial and final checkpoints, when an output directory is set.
    pub checkpoints: Option<(PathBuf, PathBuf)>,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub model: Model,
    pub report: TrainReport,
}

/// Builds the target for a ground-truth box given in search-crop pixels.
pub fn make_target(gt_crop: &BBox, search_side: usize, grid: usize, dtype: crate::tensor::DType) -> Result<Target> {
    let s = search_side as f64;
    let (cx, cy) = gt_crop.center();
    let stride = s / grid as f64;
    let cell_of = |v: f64| ((v / stride).floor().max(0.0) as usize).min(grid - 1);
    let (row, col) = (cell_of(cy), cell_of(cx));
    let mut heat = vec![0.0; grid * grid];
    for i in 0..grid {
        for j in 0..grid {
            let d2 = (i as f64 - row as f64).powi(2) + (j as f64 - col as f64).powi(2);
            heat[i * grid + j] = (-d2 / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA)).exp();
        }
    }
    Ok(Target {
        cell: (row, col),
        bbox: [cx / s, cy / s, gt_crop.w / s, gt_crop.h / s],
        heatmap: Tensor::new(&[grid, grid], heat, dtype)?,
    })
}

/// Draws the samples of one step. Deterministic in `(cfg.seed, step)`.
pub fn sample_batch(cfg: &RunConfig, seq: &Sequence, step: usize) -> Result<Vec<Sample>> {
    if seq.len() < 2 {
        return Err(Error::invalid("sample_batch", "sequence needs at least 2 frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64 + 1);
    let grid = cfg.search_side / cfg.patch_size;
    let z0 = template_pair(cfg, &seq.rgb[0], &seq.tir[0], &seq.gt[0]);
    (0..cfg.batch_size)
        .map(|_| {
            let f = rng.random_range(1..seq.len());
            let zt = if rng.random_bool(STATIC_TEMPLATE_PROB) {
                z0.clone()
            } else {
                let g = rng.random_range(0..f);
                template_pair(cfg, &seq.rgb[g], &seq.tir[g], &seq.gt[g])
            };
            let gt = seq.gt[f];
            let side = crop_side(&gt, cfg.search_factor) * rng.random_range(-SCALE_JITTER..SCALE_JITTER).exp();
            let (gx, gy) = gt.center();
            let center = (
                gx + side * rng.random_range(-CENTER_JITTER..CENTER_JITTER),
                gy + side * rng.random_range(-CENTER_JITTER..CENTER_JITTER),
            );
            let (search_rgb, win) = crop_region(&seq.rgb[f], center, side, cfg.search_side, cfg.dtype);
            let (search_tir, _) = crop_region(&seq.tir[f], center, side, cfg.search_side, cfg.dtype);
            let target = make_target(&win.to_crop(&gt), cfg.search_side, grid, cfg.dtype)?;
            let [z0_r, z0_t] = z0.clone();
            let [zt_r, zt_t] = zt;
            Ok(Sample {
                frame: f,
                inputs: FrameInputs {
                    rgb: ModalityCrops {
                        z0: z0_r,
                        zt: zt_r,
                        search: search_rgb,
                    },
                    tir: ModalityCrops {
                        z0: z0_t,
                        zt: zt_t,
                        search: search_tir,
                    },
                },
                target,
            })
        })
        .collect()
}

/// Loss terms of one sample as tape scalars.
pub struct SampleLoss<'a> {
    pub focal: Var<'a>,
    pub l1: Var<'a>,
    pub giou: Var<'a>,
}

impl<'a> SampleLoss<'a> {
    pub fn total(&self) -> Result<Var<'a>> {
        self.focal.add(self.l1.scale(L1_WEIGHT))?.add(self.giou.scale(GIOU_WEIGHT))
    }
}

fn min_var<'a>(a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
    b.sub(b.sub(a)?.relu())
}

fn max_var<'a>(a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
    b.add(a.sub(b)?.relu())
}

/// `(x1, y1)` and `(x2, y2)` corners as `[2, 1]` columns from center and size.
fn corners<'a>(center: Var<'a>, size: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
    let half = size.scale(0.5);
    Ok((center.sub(half)?, center.add(half)?))
}

fn area<'a>(wh: Var<'a>) -> Result<Var<'a>> {
    wh.slice_rows(0, 1)?.mul(wh.slice_rows(1, 1)?)
}

/// `1 - GIoU` between two boxes given as `[2, 1]` center and size columns.
pub fn giou_loss<'a>(pc: Var<'a>, ps: Var<'a>, gc: Var<'a>, gs: Var<'a>) -> Result<Var<'a>> {
    let (p1, p2) = corners(pc, ps)?;
    let (g1, g2) = corners(gc, gs)?;
    let inter_wh = min_var(p2, g2)?.sub(max_var(p1, g1)?)?.relu();
    let inter = area(inter_wh)?;
    let union = area(ps)?.add(area(gs)?)?.sub(inter)?;
    let hull = area(max_var(p2, g2)?.sub(min_var(p1, g1)?)?)?;
    let iou = inter.div(union)?;
    let penalty = hull.sub(union)?.div(hull)?;
    Ok(iou.sub(penalty)?.neg().add_scalar(1.0).reshape(&[1])?)
}

/// Focal, L1 and GIoU terms of one map set against its target.
pub fn sample_loss<'a>(ctx: &Ctx<'a>, maps: &HeadMaps<'a>, target: &Target) -> Result<SampleLoss<'a>> {
    let (h, w) = maps.score_logits.dims2()?;
    let dtype = maps.score_logits.dtype();
    let heat = target.heatmap.data();
    let pos: Vec<f64> = heat.iter().map(|&y| if y == 1.0 { 1.0 } else { 0.0 }).collect();
    let neg: Vec<f64> = heat
        .iter()
        .map(|&y| if y == 1.0 { 0.0 } else { (1.0 - y).powi(FOCAL_BETA) })
        .collect();
    let pos = ctx.constant(Tensor::new(&[h, w], pos, dtype)?);
    let neg = ctx.constant(Tensor::new(&[h, w], neg, dtype)?);
    let z = maps.score_logits;
    let p = z.sigmoid();
    let q = z.neg().sigmoid();
    let pow = |v: Var<'a>| -> Result<Var<'a>> {
        let mut acc = v;
        for _ in 1..FOCAL_ALPHA {
            acc = acc.mul(v)?;
        }
        Ok(acc)
    };
    // -log p = softplus(-z), -log(1 - p) = softplus(z)
    let pos_term = pos.mul(pow(q)?)?.mul(z.neg().softplus())?;
    let neg_term = neg.mul(pow(p)?)?.mul(z.softplus())?;
    let focal = pos_term.add(neg_term)?.sum();

    let (row, col) = target.cell;
    let mut onehot = vec![0.0; h * w];
    onehot[row * w + col] = 1.0;
    let onehot = ctx.constant(Tensor::new(&[h * w, 1], onehot, dtype)?);
    let at = |m: Var<'a>| m.reshape(&[2, h * w])?.matmul(onehot);
    let cell_origin = ctx.constant(Tensor::new(&[2, 1], vec![col as f64, row as f64], dtype)?);
    let inv_grid = ctx.constant(Tensor::new(&[2, 1], vec![1.0 / w as f64, 1.0 / h as f64], dtype)?);
    let center = at(maps.offset)?.add(cell_origin)?.mul(inv_grid)?;
    let size = at(maps.size)?;
    let [gx, gy, gw, gh] = target.bbox;
    let g_center = ctx.constant(Tensor::new(&[2, 1], vec![gx, gy], dtype)?);
    let g_size = ctx.constant(Tensor::new(&[2, 1], vec![gw, gh], dtype)?);
    let l1 = center.sub(g_center)?.abs().sum().add(size.sub(g_size)?.abs().sum())?;
    let giou = giou_loss(center, size, g_center, g_size)?;
    Ok(SampleLoss { focal, l1, giou })
}

/// Forward of a batch with per-sample input cues. Frame-1 samples read the
/// learned initial cue so it receives gradients.
fn batch_loss<'a>(
    ctx: &Ctx<'a>,
    model: &Model,
    samples: &[Sample],
    cues: &[[Tensor; 2]],
) -> Result<(Var<'a>, [f64; 3], Vec<[Var<'a>; 2]>)> {
    let init_cue = [ctx.param(model.dam.cue_init[0]), ctx.param(model.dam.cue_init[1])];
    let mut feats = Vec::with_capacity(samples.len());
    for (s, cue) in samples.iter().zip(cues) {
        let cue_vars = if s.frame == 1 {
            init_cue
        } else {
            [ctx.constant(cue[0].clone()), ctx.constant(cue[1].clone())]
        };
        feats.push(frame_features(ctx, model, &s.inputs, cue_vars)?);
    }
    let fused: Vec<Var<'a>> = feats.iter().map(|f| f.fused).collect();
    let maps = predict_maps_batch(ctx, &fused, &model.head)?;
    let scale = 1.0 / samples.len() as f64;
    let mut total: Option<Var<'a>> = None;
    let mut parts = [0.0; 3];
    for (m, s) in maps.iter().zip(samples) {
        let l = sample_loss(ctx, m, &s.target)?;
        parts[0] += l.focal.value().item()? * scale;
        parts[1] += l.l1.value().item()? * scale;
        parts[2] += l.giou.value().item()? * scale;
        let t = l.total()?.scale(scale);
        total = Some(match total {
            Some(acc) => acc.add(t)?,
            None => t,
        });
    }
    let next = feats
        .iter()
        .map(|f| [f.traces[0].next_cue, f.traces[1].next_cue])
        .collect();
    Ok((total.expect("non-empty batch"), parts, next))
}

/// Input cues for a batch read from the cue bank; frame `f` uses entry `f`.
fn bank_cues(bank: &[[Tensor; 2]], samples: &[Sample]) -> Vec<[Tensor; 2]> {
    samples.iter().map(|s| bank[s.frame].clone()).collect()
}

/// Loss of `samples` under `store` with every cue at its learned initial
/// value, the state of the cue bank before the first step.
pub fn eval_initial_loss(store: &ParamStore, model: &Model, samples: &[Sample]) -> Result<f64> {
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, store, Mode::Train);
    let cue = CueState::initial(store, &model.dam);
    let cues = vec![cue.cues; samples.len()];
    let (loss, _, _) = batch_loss(&ctx, model, samples, &cues)?;
    loss.value().item()
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get(*id);
            let updated: Vec<f64> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&w, &g))| {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    w - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS)
                })
                .collect();
            store.get_mut(*id).assign(&updated)?;
        }
        Ok(())
    }
}

fn sgd_step(store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
    for (id, g) in grads {
        let updated: Vec<f64> = store.get(*id).data().iter().zip(g.data()).map(|(&w, &g)| w - lr * g).collect();
        store.get_mut(*id).assign(&updated)?;
    }
    Ok(())
}

/// Learning rate at `step` of `steps` along the half-cosine decay.
pub fn learning_rate_at(base: f64, step: usize, steps: usize) -> f64 {
    let progress = if steps <= 1 { 0.0 } else { step as f64 / (steps - 1) as f64 };
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (FINAL_LR_FRACTION + (1.0 - FINAL_LR_FRACTION) * cos)
}

/// Writes the loss curve as CSV with a header row.
pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,total,focal,l1,giou,learning_rate")?;
    for r in losses {
        writeln!(w, "{},{},{},{},{},{}", r.step, r.total, r.focal, r.l1, r.giou, r.learning_rate)?;
    }
    w.flush()?;
    Ok(())
}

/// Fits the model to `seq` for `steps` steps, then tracks `seq` with the
/// result. With `cfg.output_dir` set, writes `init.cadw`, `final.cadw` and
/// `loss.csv` there.
pub fn train_overfit(cfg: &RunConfig, seq: &Sequence, steps: usize, learning_rate: f64) -> Result<TrainOutcome> {
    if cfg.profile != Profile::Toy {
        return Err(Error::Config("overfitting runs only on the toy profile".into()));
    }
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::Config(format!("learning rate {learning_rate} must be positive")));
    }
    let (store, model) = Model::init(cfg)?;
    train_from(cfg, seq, store, model, steps, learning_rate)
}

/// [`train_overfit`] starting from the given parameters.
pub fn train_from(
    cfg: &RunConfig,
    seq: &Sequence,
    mut store: ParamStore,
    model: Model,
    steps: usize,
    learning_rate: f64,
) -> Result<TrainOutcome> {
    let checkpoints = match &cfg.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let init = dir.join("init.cadw");
            save_weights(&init, &store.to_named())?;
            Some((init, dir.join("final.cadw")))
        }
        None => None,
    };

    let initial = CueState::initial(&store, &model.dam).cues;
    let mut bank: Vec<[Tensor; 2]> = vec![initial; seq.len() + 1];
    let mut adam = Adam::new(&store);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let samples = sample_batch(cfg, seq, step)?;
        let cues = bank_cues(&bank, &samples);
        let lr = learning_rate_at(learning_rate, step, steps);
        let (grads, stats, record, next) = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, Mode::Train);
            let (loss, parts, next) = batch_loss(&ctx, &model, &samples, &cues)?;
            let total = loss.value().item()?;
            if !total.is_finite() {
                return Err(Error::Diverged { step, loss: total });
            }
            let g = tape.backward(loss)?;
            let grads: Vec<(ParamId, Tensor)> = ctx
                .bound_params()
                .into_iter()
                .filter(|(id, _)| store.is_trainable(*id))
                .filter_map(|(id, var)| g.get(var).map(|t| (id, t)))
                .collect();
            let next: Vec<[Tensor; 2]> = next
                .iter()
                .map(|[r, t]| [r.value().as_ref().clone(), t.value().as_ref().clone()])
                .collect();
            let record = LossRecord {
                step,
                total,
                focal: parts[0],
                l1: parts[1],
                giou: parts[2],
                learning_rate: lr,
            };
            (grads, ctx.take_stats(), record, next)
        };
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::invalid(
                "train_overfit",
                format!("non-finite gradient for {} at step {step}", store.name(*id)),
            ));
        }
        match cfg.optimizer {
            OptimizerKind::Adam => adam.step(&mut store, &grads, lr)?,
            OptimizerKind::Sgd => sgd_step(&mut store, &grads, lr)?,
        }
        for (id, value) in stats {
            store.get_mut(id).assign(value.data())?;
        }
        for (s, cue) in samples.iter().zip(next) {
            bank[s.frame + 1] = cue;
        }
        losses.push(record);
    }

    if let Some((_, fin)) = &checkpoints {
        save_weights(fin, &store.to_named())?;
    }
    if let Some(dir) = &cfg.output_dir {
        write_loss_csv(&dir.join("loss.csv"), &losses)?;
    }
    let track = run_tracker(&model, &store, cfg, seq)?;
    let metrics = eval_metrics(&track.boxes, &seq.gt)?;
    Ok(TrainOutcome {
        store,
        model,
        report: TrainReport {
            losses,
            track,
            metrics,
            checkpoints,
        },
    })
}

/// Mean loss over consecutive windows of `window` steps.
pub fn window_means(losses: &[LossRecord], window: usize) -> Vec<f64> {
    losses
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_sequence, GenConfig};
    use crate::tensor::DType;
    use crate::weights::load_weights;

    fn small_cfg() -> RunConfig {
        RunConfig {
            embed_dim: 16,
            depth: 3,
            mfi_layers: vec![2],
            mfi_ratio: 4,
            state_dim: 4,
            head_width: 8,
            experts: 3,
            ..RunConfig::toy()
        }
    }

    fn seq() -> Sequence {
        let mut g = GenConfig::new(3, 6);
        g.frame_side = 64;
        gen_sequence(&g).unwrap()
    }

    fn giou_direct(p: [f64; 4], g: [f64; 4]) -> f64 {
        let pb = BBox::from_center(p[0], p[1], p[2], p[3]);
        let gb = BBox::from_center(g[0], g[1], g[2], g[3]);
        let iou = pb.iou(&gb);
        let union = pb.area() + gb.area() - iou * (pb.area() + gb.area()) / (1.0 + iou);
        let hx = (pb.x + pb.w).max(gb.x + gb.w) - pb.x.min(gb.x);
        let hy = (pb.y + pb.h).max(gb.y + gb.h) - pb.y.min(gb.y);
        let hull = hx * hy;
        1.0 - (iou - (hull - union) / hull)
    }

    #[test]
    fn giou_loss_matches_box_geometry() {
        let cases = [
            ([0.5, 0.5, 0.2, 0.3], [0.5, 0.5, 0.2, 0.3]),
            ([0.4, 0.5, 0.2, 0.3], [0.5, 0.55, 0.25, 0.2]),
            ([0.1, 0.1, 0.1, 0.1], [0.8, 0.7, 0.2, 0.1]),
        ];
        for (p, g) in cases {
            let tape = Tape::new();
            let col = |a: f64, b: f64| tape.constant(Tensor::new(&[2, 1], vec![a, b], DType::F64).unwrap());
            let l = giou_loss(col(p[0], p[1]), col(p[2], p[3]), col(g[0], g[1]), col(g[2], g[3])).unwrap();
            let got = l.value().item().unwrap();
            assert!((got - giou_direct(p, g)).abs() < 1e-12, "{got} vs {}", giou_direct(p, g));
        }
    }

    #[test]
    fn target_peaks_at_center_cell() {
        let t = make_target(&BBox::from_center(20.0, 45.0, 10.0, 12.0), 64, 8, DType::F64).unwrap();
        assert_eq!(t.cell, (5, 2));
        assert_eq!(t.heatmap.at(&[5, 2]), 1.0);
        assert_eq!(t.heatmap.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert!((t.bbox[0] - 20.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn samples_are_deterministic_per_step() {
        let cfg = small_cfg();
        let s = seq();
        assert_eq!(sample_batch(&cfg, &s, 3).unwrap(), sample_batch(&cfg, &s, 3).unwrap());
        assert_ne!(sample_batch(&cfg, &s, 3).unwrap(), sample_batch(&cfg, &s, 4).unwrap());
    }

    #[test]
    fn learning_rate_decays_to_floor() {
        assert_eq!(learning_rate_at(1.0, 0, 10), 1.0);
        assert!((learning_rate_at(1.0, 9, 10) - FINAL_LR_FRACTION).abs() < 1e-15);
    }

    #[test]
    fn first_loss_is_recomputable_from_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..small_cfg()
        };
        let s = seq();
        let out = train_overfit(&cfg, &s, 2, cfg.learning_rate).unwrap();
        let (init, fin) = out.report.checkpoints.clone().unwrap();
        assert!(fin.exists());
        let (mut store, model) = Model::init(&cfg).unwrap();
        store.load_named(load_weights(&init).unwrap()).unwrap();
        let again = eval_initial_loss(&store, &model, &sample_batch(&cfg, &s, 0).unwrap()).unwrap();
        assert_eq!(again, out.report.losses[0].total);
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(out.report.track.boxes[0], s.gt[0]);
    }

    #[test]
    fn paper_profile_is_rejected() {
        let cfg = RunConfig::paper();
        assert!(matches!(train_overfit(&cfg, &seq(), 1, 1e-3), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let cfg = small_cfg();
        let (mut store, model) = Model::init(&cfg).unwrap();
        store.get_mut(model.head.cls.out_bias).fill(f64::NAN);
        let r = train_from(&cfg, &seq(), store, model, 3, 1e-3);
        assert!(matches!(r, Err(Error::Diverged { step: 0, .. })), "{:?}", r.err());
    }

    #[test]
    fn nan_learning_rate_is_rejected() {
        assert!(train_overfit(&small_cfg(), &seq(), 1, f64::NAN).is_err());
    }
}
