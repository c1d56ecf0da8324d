//! Structural properties: identity at initialization, routing policy and
//! deformable sampling behavior, tracker state and determinism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::random_image;
use crate::cam::select_experts;
use crate::config::RunConfig;
use crate::dam::{dam_forward, deform_sample, Dam, DamConfig, ReferenceGrid};
use crate::data::{gen_sequence, GenConfig, Sequence};
use crate::error::Result;
use crate::model::Model;
use crate::params::{Ctx, Init, Mode, ParamStore};
use crate::tensor::{DType, Tape, Tensor, Var};
use crate::tracker::{template_pair, Tracker, TrackerState};

use super::oracles::{is_valid_routing, routing_exhaustive_l6};
use super::CheckRecord;

fn record(name: &str, passed: bool, detail: String) -> CheckRecord {
    CheckRecord {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Backbone features with the interaction enabled versus removed, at
/// initialization, compared bit for bit over every layer and both streams.
pub fn mfi_identity_at_init(cfg: &RunConfig, trials: usize) -> Result<bool> {
    let (store, model) = Model::init(cfg)?;
    let bare = model.without_mfi();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for _ in 0..trials {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let bb = &model.backbone;
        let mut seqs = Vec::new();
        for _ in 0..2 {
            let z0 = bb.patch.forward(&ctx, &random_image(cfg.template_side, cfg.dtype, &mut rng), false)?;
            let zt = bb.patch.forward(&ctx, &random_image(cfg.template_side, cfg.dtype, &mut rng), false)?;
            let x = bb.patch.forward(&ctx, &random_image(cfg.search_side, cfg.dtype, &mut rng), true)?;
            let cue = ctx.constant(Tensor::randn(&[cfg.cue_count, cfg.embed_dim], 1.0, cfg.dtype, &mut rng));
            seqs.push(bb.assemble(&ctx, cue, z0, zt, x)?.0);
        }
        let with = bb.forward(&ctx, seqs[0], seqs[1])?;
        let without = bare.backbone.forward(&ctx, seqs[0], seqs[1])?;
        let same = |a: &[Var<'_>], b: &[Var<'_>]| a.iter().zip(b).all(|(x, y)| x.value().bit_eq(&y.value()));
        if !same(&with.rgb, &without.rgb) || !same(&with.tir, &without.tir) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// With zero offset heads and zero attention output projections the cue
/// and both sampled templates pass through the alignment module unchanged.
pub fn dam_identity_at_init(dim: usize, cue_count: usize, dtype: DType, trials: usize, seed: u64) -> Result<bool> {
    let cfg = DamConfig {
        embed_dim: dim,
        heads: 2,
        cue_count,
        offset_scale: 5.0,
        ffn_ratio: 4,
        cue_keys: Default::default(),
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dam = Dam::new(&mut Init::new(&mut store, &mut rng, dtype), &cfg)?;
    for _ in 0..trials {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let mut t = |n: usize| ctx.constant(Tensor::randn(&[n, dim], 1.0, dtype, &mut rng));
        let templates = [(t(16), t(16)), (t(16), t(16))];
        let search = [t(9), t(9)];
        let cues = [t(cue_count), t(cue_count)];
        let outs = dam_forward(&ctx, &dam, templates, search, cues)?;
        for (m, o) in outs.iter().enumerate() {
            let expected = Var::concat_rows(&[templates[m].0, templates[m].1])?;
            let zero_offsets = o.offsets.iter().all(|v| v.value().data().iter().all(|&x| x == 0.0));
            if !o.next_cue.value().bit_eq(&cues[m].value()) || !o.sampled.value().bit_eq(&expected.value()) || !zero_offsets {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingReport {
    pub vectors: usize,
    pub cases: usize,
    pub failures: Vec<String>,
}

/// Scores on a dyadic grid so shifts and affine maps stay exact; ties occur.
fn dyadic_scores<R: Rng + ?Sized>(rng: &mut R, l: usize) -> Vec<f64> {
    (0..l).map(|_| rng.random_range(-64i32..=64) as f64 / 16.0).collect()
}

/// Routing policy over random score vectors and every `k` in `3..=L`:
/// both end layers present, cardinality `k`, invariance under shifts and
/// strictly increasing transforms, and lower-index tie-breaking.
pub fn routing_policy_suite(vectors: usize, seed: u64) -> RoutingReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = RoutingReport {
        vectors,
        ..Default::default()
    };
    let transforms: [(&str, fn(f64) -> f64); 4] = [
        ("shift", |x| x + 7.0),
        ("affine", |x| 2.0 * x - 3.0),
        ("exp", f64::exp),
        ("cubic", |x| x * x * x + x),
    ];
    for v in 0..vectors {
        let l = rng.random_range(3..=12);
        let scores = dyadic_scores(&mut rng, l);
        for k in 3..=l {
            report.cases += 1;
            let fail = |why: &str| format!("vector {v} (L = {l}, k = {k}): {why}");
            let chosen = match select_experts(&scores, k) {
                Ok(c) => c,
                Err(e) => {
                    report.failures.push(fail(&e.to_string()));
                    continue;
                }
            };
            if chosen.len() != k || !chosen.contains(&1) || !chosen.contains(&l) {
                report.failures.push(fail("missing end layer or wrong size"));
            }
            if !is_valid_routing(&scores, k, &chosen) {
                report.failures.push(fail("not the lower-index top-k"));
            }
            for (name, f) in transforms {
                let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
                if select_experts(&mapped, k).ok().as_ref() != Some(&chosen) {
                    report.failures.push(fail(&format!("{name} transform changed the selection")));
                }
            }
        }
        let flat = vec![scores[0]; l];
        for k in 3..=l {
            let expected: Vec<usize> = (1..=k - 1).chain(std::iter::once(l)).collect();
            if select_experts(&flat, k).ok() != Some(expected) {
                report.failures.push(format!("equal scores L = {l}, k = {k}: ties not broken low"));
            }
        }
    }
    report
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplingReport {
    pub fields: usize,
    pub zero_identity: usize,
    pub integer_shift: usize,
    pub locality: usize,
    pub clamp: usize,
}

impl SamplingReport {
    pub fn passed(&self) -> bool {
        [self.zero_identity, self.integer_shift, self.locality, self.clamp]
            .iter()
            .all(|&n| n == self.fields)
    }
}

fn sample(grid: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    let tape = Tape::inference();
    let store = ParamStore::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let refs = ReferenceGrid::new(grid.shape()[0], grid.shape()[1], grid.dtype());
    let out = deform_sample(&ctx, ctx.constant(grid.clone()), &refs, ctx.constant(offsets.clone()))?;
    Ok(out.value().as_ref().clone())
}

/// Deformable sampling fuzzed over random grids and offset fields. Each
/// counter is the number of fields for which that property held.
pub fn sampling_suite(fields: usize, seed: u64) -> Result<SamplingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SamplingReport {
        fields,
        ..Default::default()
    };
    for _ in 0..fields {
        let (h, w, c) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..4));
        let dtype = if rng.random_bool(0.5) { DType::F32 } else { DType::F64 };
        let grid = Tensor::randn(&[h, w, c], 1.0, dtype, &mut rng);
        let cell = |i: i64, j: i64, ch: usize| {
            let i = i.clamp(0, h as i64 - 1) as usize;
            let j = j.clamp(0, w as i64 - 1) as usize;
            grid.at(&[i, j, ch])
        };

        let zero = sample(&grid, &Tensor::zeros(&[h, w, 2], dtype))?;
        if zero.bit_eq(&grid.reshape(&[h * w, c])?) {
            r.zero_identity += 1;
        }

        let shifts: Vec<f64> = (0..h * w * 2).map(|_| rng.random_range(-3i32..=3) as f64).collect();
        let shifted = sample(&grid, &Tensor::new(&[h, w, 2], shifts.clone(), dtype)?)?;
        let ok = (0..h * w).all(|p| {
            let (i, j) = ((p / w) as i64, (p % w) as i64);
            let (dx, dy) = (shifts[2 * p] as i64, shifts[2 * p + 1] as i64);
            (0..c).all(|ch| shifted.at(&[p, ch]) == cell(i + dy, j + dx, ch))
        });
        if ok {
            r.integer_shift += 1;
        }

        let offs: Vec<f64> = (0..h * w * 2).map(|_| rng.random_range(-4.0..4.0)).collect();
        let out = sample(&grid, &Tensor::new(&[h, w, 2], offs.clone(), DType::F64)?)?;
        let ok = (0..h * w).all(|p| {
            let x = ((p % w) as f64 + offs[2 * p]).clamp(0.0, (w - 1) as f64);
            let y = ((p / w) as f64 + offs[2 * p + 1]).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (x.floor() as i64, y.floor() as i64);
            (0..c).all(|ch| {
                let near = [cell(y0, x0, ch), cell(y0, x0 + 1, ch), cell(y0 + 1, x0, ch), cell(y0 + 1, x0 + 1, ch)];
                let lo = near.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = near.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = out.at(&[p, ch]);
                v >= lo - 1e-12 && v <= hi + 1e-12
            })
        });
        if ok {
            r.locality += 1;
        }

        // points pushed past the border read the same values as the clamped
        // point, and carry no gradient along the clamped axis
        let far: Vec<f64> = (0..h * w * 2)
            .map(|_| {
                let m = rng.random_range(10.0..50.0);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect();
        let clamped: Vec<f64> = (0..h * w * 2)
            .map(|q| {
                let p = q / 2;
                let (base, max) = if q % 2 == 0 { ((p % w) as f64, (w - 1) as f64) } else { ((p / w) as f64, (h - 1) as f64) };
                (base + far[q]).clamp(0.0, max) - base
            })
            .collect();
        let a = sample(&grid, &Tensor::new(&[h, w, 2], far.clone(), DType::F64)?)?;
        let b = sample(&grid, &Tensor::new(&[h, w, 2], clamped, DType::F64)?)?;
        let tape = Tape::new();
        let store = ParamStore::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let off = tape.leaf(Tensor::new(&[h, w, 2], far, DType::F64)?.with_requires_grad(true));
        let refs = ReferenceGrid::new(h, w, DType::F64);
        let loss = deform_sample(&ctx, ctx.constant(grid.clone()), &refs, off)?.sum();
        let g = tape.backward(loss)?.get_or_zero(off);
        if a.bit_eq(&b) && g.data().iter().all(|&v| v == 0.0) {
            r.clamp += 1;
        }
    }
    Ok(r)
}

/// Checks the state contract after a frame: the dynamic template is the
/// template crop of an already processed frame around the box predicted
/// there, the cue is finite and the last box has positive area.
pub fn tracker_state_ok(cfg: &RunConfig, seq: &Sequence, state: &TrackerState, boxes: &[crate::head::BBox]) -> bool {
    let (src, b) = state.zt_source;
    if src > state.frame || boxes.get(src) != Some(&b) {
        return false;
    }
    let crop = template_pair(cfg, &seq.rgb[src], &seq.tir[src], &b);
    crop[0].bit_eq(&state.zt[0])
        && crop[1].bit_eq(&state.zt[1])
        && state.cue.is_finite()
        && state.cue.frame == state.frame
        && state.last.w > 0.0
        && state.last.h > 0.0
        && boxes.last() == Some(&state.last)
}

/// Tracks random short sequences with frequent template refreshes and
/// checks the state after every frame. Returns frames checked and failures.
pub fn tracker_state_suite(sequences: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut frames, mut bad) = (0, 0);
    for _ in 0..sequences {
        let cfg = RunConfig {
            embed_dim: 16,
            depth: 3,
            mfi_layers: vec![2],
            mfi_ratio: 4,
            state_dim: 4,
            head_width: 8,
            experts: 3,
            update_interval: Some(2),
            update_threshold: 0.0,
            seed: rng.random(),
            ..RunConfig::toy()
        };
        let (store, model) = Model::init(&cfg)?;
        let mut g = GenConfig::new(rng.random(), rng.random_range(3..7));
        g.frame_side = 64;
        g.misalignment_px = rng.random_range(0.0..3.0);
        let seq = gen_sequence(&g)?;
        let mut tracker = Tracker::init(&model, &store, &cfg, &seq.rgb[0], &seq.tir[0], seq.gt[0])?;
        let mut boxes = vec![seq.gt[0]];
        for i in 1..seq.len() {
            let r = tracker.step(&seq.rgb[i], &seq.tir[i])?;
            boxes.push(r.bbox);
            frames += 1;
            if !tracker_state_ok(&cfg, &seq, tracker.state(), &boxes) {
                bad += 1;
            }
        }
    }
    Ok((frames, bad))
}

pub fn run() -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    let toy = RunConfig::toy();
    let f64_toy = RunConfig {
        dtype: DType::F64,
        ..RunConfig::toy()
    };
    let mfi_ok = mfi_identity_at_init(&toy, 3)? && mfi_identity_at_init(&f64_toy, 3)?;
    out.push(record("mfi_identity_at_init", mfi_ok, "all layers, both streams, f32 and f64".into()));
    let dam_ok = dam_identity_at_init(16, 1, DType::F32, 10, 1)? && dam_identity_at_init(16, 3, DType::F64, 10, 2)?;
    out.push(record("dam_identity_at_init", dam_ok, "cue and sampled templates bit-exact".into()));

    let routing = routing_policy_suite(1000, 3);
    out.push(record(
        "routing_policy",
        routing.failures.is_empty(),
        format!(
            "{} vectors, {} cases, {} failures{}",
            routing.vectors,
            routing.cases,
            routing.failures.len(),
            routing.failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    ));
    let (cases, bad) = routing_exhaustive_l6();
    out.push(record("routing_exhaustive_l6", bad == 0, format!("{cases} cases, {bad} mismatches")));

    let s = sampling_suite(1000, 4)?;
    out.push(record(
        "deformable_sampling",
        s.passed(),
        format!(
            "{} fields: zero {} shift {} locality {} clamp {}",
            s.fields, s.zero_identity, s.integer_shift, s.locality, s.clamp
        ),
    ));

    let (frames, bad) = tracker_state_suite(4, 5)?;
    out.push(record("tracker_state", bad == 0, format!("{frames} frames, {bad} violations")));

    Ok(out)
}

