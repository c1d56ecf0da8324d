//! Central finite-difference checks of reverse-mode gradients through every
//! module's composite forward, in 64-bit mode.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::cam::{route, Cam, CamConfig, ExpertPolicy};
use crate::config::RunConfig;
use crate::dam::{dam_forward, CueKeys, Dam, DamConfig};
use crate::error::Result;
use crate::head::{fuse, predict_maps_batch, Head, HeadConfig};
use crate::mfi::{Mfi, MfiConfig};
use crate::model::{frame_features, FrameInputs, ModalityCrops, Model};
use crate::params::{Ctx, Init, Mode, ParamId, ParamStore};
use crate::tensor::{ConvSpec, DType, Tape, Tensor, Var};

use super::CheckRecord;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Bound on the spread of the three second differences of the five-point
/// stencil `x + k h, k = -2..=2`, in units of `h |f'|`. Smooth coordinates
/// spread by about `2 h^2 |f'''|`; a kink (ReLU, bilinear cell edge, clamp,
/// routing flip) inside the stencil or curvature stiff enough to bias the
/// central difference exceeds it, and the coordinate is skipped.
pub const SMOOTHNESS_TOL: f64 = 1e-4;
/// Largest tolerated fraction of skipped coordinates per module.
pub const MAX_SKIPPED_FRACTION: f64 = 0.25;

type Forward = Box<dyn for<'a> Fn(&Ctx<'a>, &[Var<'a>]) -> Result<Vec<Var<'a>>>>;

/// A differentiable composite: parameters, input tensors and the forward
/// producing the outputs to be checked.
pub struct GradCase {
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    pub mode: Mode,
    pub forward: Forward,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Coord {
    Param(ParamId, usize),
    Input(usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    /// `|g_ad - g_fd| / max(|g_ad|, |g_fd|)` over the checked coordinates.
    pub rel_error: f64,
    pub checked: usize,
    pub kinks: usize,
}

/// `sum_i <r_i, y_i>` for fixed random weights `r_i`.
fn projected_loss<'a>(ctx: &Ctx<'a>, outs: &[Var<'a>], weights: &[Tensor]) -> Result<Var<'a>> {
    let mut total: Option<Var<'a>> = None;
    for (o, w) in outs.iter().zip(weights) {
        let w = ctx.constant(w.reshape(&o.shape())?);
        let term = o.mul(w)?.sum();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one output"))
}

impl GradCase {
    fn eval(&self, weights: &[Tensor]) -> Result<f64> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.store, self.mode);
        let inputs: Vec<Var<'_>> = self.inputs.iter().map(|t| ctx.constant(t.clone())).collect();
        let outs = (self.forward)(&ctx, &inputs)?;
        projected_loss(&ctx, &outs, weights)?.value().item()
    }

    fn value_at(&self, c: Coord) -> f64 {
        match c {
            Coord::Param(id, i) => self.store.get(id).data()[i],
            Coord::Input(k, i) => self.inputs[k].data()[i],
        }
    }

    fn set(&mut self, c: Coord, v: f64) {
        match c {
            Coord::Param(id, i) => self.store.get_mut(id).data_mut()[i] = v,
            Coord::Input(k, i) => self.inputs[k].data_mut()[i] = v,
        }
    }

    fn eval_at(&mut self, c: Coord, v: f64, weights: &[Tensor]) -> Result<f64> {
        let x = self.value_at(c);
        self.set(c, v);
        let out = self.eval(weights);
        self.set(c, x);
        out
    }

    /// Central difference at `STEP` and whether the stencil around the
    /// coordinate is smooth.
    fn central(&mut self, c: Coord, base: f64, weights: &[Tensor]) -> Result<(f64, bool)> {
        let x = self.value_at(c);
        let h = STEP;
        let f = [
            self.eval_at(c, x - 2.0 * h, weights)?,
            self.eval_at(c, x - h, weights)?,
            base,
            self.eval_at(c, x + h, weights)?,
            self.eval_at(c, x + 2.0 * h, weights)?,
        ];
        let fd = (f[3] - f[1]) / (2.0 * h);
        let second: Vec<f64> = (1..4).map(|k| f[k - 1] - 2.0 * f[k] + f[k + 1]).collect();
        let (lo, hi) = second
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let smooth = (hi - lo) / h <= SMOOTHNESS_TOL * fd.abs() + 1e-9;
        Ok((fd, smooth))
    }

    /// Compares reverse-mode gradients with central differences on `coords`
    /// randomly chosen coordinates of parameters and inputs.
    pub fn check<R: Rng + ?Sized>(&mut self, rng: &mut R, coords: usize) -> Result<GradResult> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, self.mode);
        let inputs: Vec<Var<'_>> = self
            .inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let outs = (self.forward)(&ctx, &inputs)?;
        let weights: Vec<Tensor> = outs
            .iter()
            .map(|o| Tensor::randn(&[o.value().numel()], 1.0, DType::F64, rng))
            .collect();
        let loss = projected_loss(&ctx, &outs, &weights)?;
        let grads = tape.backward(loss)?;

        let mut targets: Vec<(Coord, Tensor)> = Vec::new();
        for (id, var) in ctx.bound_params() {
            if self.store.is_trainable(id) && self.store.get(id).numel() > 0 {
                targets.push((Coord::Param(id, 0), grads.get_or_zero(var)));
            }
        }
        for (k, var) in inputs.iter().enumerate() {
            if var.value().numel() > 0 {
                targets.push((Coord::Input(k, 0), grads.get_or_zero(*var)));
            }
        }
        drop(ctx);

        let base = self.eval(&weights)?;
        let (mut diff2, mut ad2, mut fd2) = (0.0, 0.0, 0.0);
        let (mut checked, mut kinks) = (0, 0);
        for _ in 0..coords {
            let (target, g) = &targets[rng.random_range(0..targets.len())];
            let i = rng.random_range(0..g.numel());
            let c = match *target {
                Coord::Param(id, _) => Coord::Param(id, i),
                Coord::Input(k, _) => Coord::Input(k, i),
            };
            let (fd, smooth) = self.central(c, base, &weights)?;
            if !smooth {
                kinks += 1;
                continue;
            }
            let ad = g.data()[i];
            diff2 += (ad - fd).powi(2);
            ad2 += ad * ad;
            fd2 += fd * fd;
            checked += 1;
        }
        let scale = ad2.sqrt().max(fd2.sqrt());
        let rel_error = if diff2 == 0.0 { 0.0 } else { diff2.sqrt() / scale.max(1e-300) };
        Ok(GradResult {
            rel_error,
            checked,
            kinks,
        })
    }
}

/// Moves every trainable parameter off its initialization so zero-initialized
/// projections do not hide upstream gradients.
pub fn perturb_params<R: Rng + ?Sized>(store: &mut ParamStore, std: f64, rng: &mut R) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let t = store.get_mut(id);
        let noise = Tensor::randn(t.shape(), std, DType::F64, rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

fn rand_t<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, DType::F64, rng)
}

const DIM: usize = 8;

pub fn scan_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (l, d, s) = (rng.random_range(2..9), rng.random_range(1..4), rng.random_range(1..5));
    GradCase {
        store: ParamStore::new(),
        inputs: vec![
            rand_t(rng, &[l, d]),
            rand_t(rng, &[l, d]),
            rand_t(rng, &[d, s]),
            rand_t(rng, &[l, s]),
            rand_t(rng, &[l, s]),
            rand_t(rng, &[d]),
        ],
        mode: Mode::Eval,
        forward: Box::new(|_, v| {
            // positive step sizes and negative decay rates, as in the model
            let delta = v[1].softplus();
            let a = v[2].exp().neg();
            Ok(vec![v[0].selective_scan(delta, a, v[3], v[4], v[5])?])
        }),
    }
}

pub fn conv_case(rng: &mut ChaCha8Rng) -> GradCase {
    let c = rng.random_range(1..4);
    let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
    let co = rng.random_range(1..4);
    let l = rng.random_range(2..8);
    GradCase {
        store: ParamStore::new(),
        inputs: vec![
            rand_t(rng, &[c, h, w]),
            rand_t(rng, &[co, c, 3, 3]),
            rand_t(rng, &[co]),
            rand_t(rng, &[c, 1, 3, 3]),
            rand_t(rng, &[co, c, 1, 1]),
            rand_t(rng, &[l, c]),
            rand_t(rng, &[c, 3]),
            rand_t(rng, &[c]),
        ],
        mode: Mode::Eval,
        forward: Box::new(|_, v| {
            Ok(vec![
                v[0].conv2d(v[1], Some(v[2]), ConvSpec::dense(1))?,
                v[0].conv2d(v[3], None, ConvSpec::depthwise(1))?,
                v[0].conv2d(v[4], Some(v[2]), ConvSpec::pointwise())?,
                v[5].conv1d_depthwise(v[6], Some(v[7]))?,
            ])
        }),
    }
}

pub fn bilinear_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (h, w, c) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..4));
    let n = 6;
    // interior points away from the clamp boundary
    let pts: Vec<f64> = (0..n)
        .flat_map(|_| [rng.random_range(0.05..(w - 1) as f64 - 0.05), rng.random_range(0.05..(h - 1) as f64 - 0.05)])
        .collect();
    GradCase {
        store: ParamStore::new(),
        inputs: vec![rand_t(rng, &[h, w, c]), Tensor::new(&[n, 2], pts, DType::F64).expect("point shape")],
        mode: Mode::Eval,
        forward: Box::new(|_, v| Ok(vec![v[0].bilinear_sample(v[1])?])),
    }
}

fn init_case<T>(seed: u64, build: impl FnOnce(&mut Init<'_>) -> Result<T>) -> Result<(ParamStore, T)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = build(&mut Init::new(&mut store, &mut rng, DType::F64))?;
    perturb_params(&mut store, 0.3, &mut rng);
    Ok((store, module))
}

pub fn backbone_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let cfg = BackboneConfig {
        patch_size: 4,
        embed_dim: DIM,
        depth: 2,
        heads: 2,
        template_side: 8,
        search_side: 8,
        mfi_layers: vec![1],
        cue_count: 1,
        ffn_ratio: 2,
        shared_trunk: rng.random_bool(0.5),
    };
    let mfi = MfiConfig {
        embed_dim: DIM,
        ratio: 2,
        state_dim: 3,
        layers: 1,
        conv_width: 3,
    };
    let (store, bb) = init_case(rng.random(), |i| Backbone::new(i, &cfg, &mfi))?;
    let images: Vec<Tensor> = (0..6).map(|_| rand_t(rng, &[3, 8, 8])).collect();
    let inputs = vec![rand_t(rng, &[1, DIM]), rand_t(rng, &[1, DIM])];
    Ok(GradCase {
        store,
        inputs,
        mode: Mode::Train,
        forward: Box::new(move |ctx, v| {
            let mut seqs = Vec::new();
            for m in 0..2 {
                let z0 = bb.patch.forward(ctx, &images[3 * m], false)?;
                let zt = bb.patch.forward(ctx, &images[3 * m + 1], false)?;
                let x = bb.patch.forward(ctx, &images[3 * m + 2], true)?;
                seqs.push(bb.assemble(ctx, v[m], z0, zt, x)?.0);
            }
            let f = bb.forward(ctx, seqs[0], seqs[1])?;
            Ok(f.rgb.into_iter().chain(f.tir).collect())
        }),
    })
}

pub fn mfi_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let cfg = MfiConfig {
        embed_dim: DIM,
        ratio: 2,
        state_dim: rng.random_range(1..5),
        layers: 2,
        conv_width: 3,
    };
    let (store, mfi) = init_case(rng.random(), |i| Mfi::new(&mut i.scope("mfi"), &cfg))?;
    let n = rng.random_range(2..7);
    Ok(GradCase {
        store,
        inputs: vec![rand_t(rng, &[n, DIM]), rand_t(rng, &[n, DIM])],
        mode: Mode::Eval,
        forward: Box::new(move |ctx, v| {
            let (r, t) = mfi.forward(ctx, v[0], v[1])?;
            Ok(vec![r, t])
        }),
    })
}

pub fn cam_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let cfg = CamConfig {
        embed_dim: DIM,
        depth: 4,
        experts: 3,
        policy: ExpertPolicy::Routed,
    };
    let (store, cam) = init_case(rng.random(), |i| Cam::new(i, &cfg))?;
    let n = rng.random_range(2..6);
    Ok(GradCase {
        store,
        inputs: (0..4).map(|_| rand_t(rng, &[n, DIM])).collect(),
        mode: Mode::Eval,
        forward: Box::new(move |ctx, v| {
            let out = cam.forward(ctx, v)?;
            Ok(vec![out.features, route(ctx, v, &cam.router)?])
        }),
    })
}

pub fn dam_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let cfg = DamConfig {
        embed_dim: DIM,
        heads: 2,
        cue_count: 2,
        offset_scale: 1.5,
        ffn_ratio: 2,
        cue_keys: if rng.random_bool(0.5) { CueKeys::SameModality } else { CueKeys::OtherModality },
    };
    let (store, dam) = init_case(rng.random(), |i| Dam::new(i, &cfg))?;
    let mut inputs = Vec::new();
    for _ in 0..2 {
        inputs.push(rand_t(rng, &[9, DIM]));
        inputs.push(rand_t(rng, &[9, DIM]));
        inputs.push(rand_t(rng, &[4, DIM]));
        inputs.push(rand_t(rng, &[2, DIM]));
    }
    Ok(GradCase {
        store,
        inputs,
        mode: Mode::Eval,
        forward: Box::new(move |ctx, v| {
            let outs = dam_forward(ctx, &dam, [(v[0], v[1]), (v[4], v[5])], [v[2], v[6]], [v[3], v[7]])?;
            let mut all = Vec::new();
            for o in outs {
                all.extend([o.response.features, o.response.gate, o.next_cue, o.sampled, o.offsets[0], o.offsets[1]]);
            }
            Ok(all)
        }),
    })
}

pub fn head_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let cfg = HeadConfig {
        embed_dim: DIM,
        width: 4,
        depth: 2,
    };
    let (store, head) = init_case(rng.random(), |i| Head::new(i, &cfg))?;
    Ok(GradCase {
        store,
        inputs: (0..4).map(|_| rand_t(rng, &[9, DIM])).collect(),
        mode: Mode::Train,
        forward: Box::new(move |ctx, v| {
            let fused = [fuse(ctx, v[0], v[1], &head)?, fuse(ctx, v[2], v[3], &head)?];
            let mut all = Vec::new();
            for m in predict_maps_batch(ctx, &fused, &head)? {
                all.extend([m.score, m.offset, m.size]);
            }
            Ok(all)
        }),
    })
}

/// Full single-frame network at a tiny width.
pub fn model_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let cfg = RunConfig {
        dtype: DType::F64,
        patch_size: 4,
        embed_dim: DIM,
        depth: 3,
        heads: 2,
        template_side: 8,
        search_side: 12,
        ffn_ratio: 2,
        mfi_layers: vec![2],
        mfi_ratio: 2,
        state_dim: 3,
        mamba_layers: 1,
        conv_width: 3,
        experts: 2,
        cue_count: 1,
        head_width: 4,
        head_depth: 1,
        seed: rng.random(),
        ..RunConfig::toy()
    };
    let (mut store, model) = Model::init(&cfg)?;
    perturb_params(&mut store, 0.3, rng);
    let crops = |rng: &mut ChaCha8Rng| ModalityCrops {
        z0: rand_t(rng, &[3, 8, 8]),
        zt: rand_t(rng, &[3, 8, 8]),
        search: rand_t(rng, &[3, 12, 12]),
    };
    let frame = FrameInputs {
        rgb: crops(rng),
        tir: crops(rng),
    };
    Ok(GradCase {
        store,
        inputs: vec![rand_t(rng, &[1, DIM]), rand_t(rng, &[1, DIM])],
        mode: Mode::Eval,
        forward: Box::new(move |ctx, v| {
            let f = frame_features(ctx, &model, &frame, [v[0], v[1]])?;
            let m = predict_maps_batch(ctx, &[f.fused], &model.head)?.pop().expect("one frame");
            Ok(vec![m.score, m.offset, m.size, f.traces[0].next_cue, f.traces[1].next_cue])
        }),
    })
}

/// Worst result over `draws` independent cases of one module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleGradReport {
    pub module: String,
    pub draws: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinks: usize,
    pub seconds: f64,
}

impl ModuleGradReport {
    /// Error within tolerance on enough smooth coordinates.
    pub fn passed(&self) -> bool {
        let total = self.checked + self.kinks;
        self.max_rel_error <= TOLERANCE
            && self.checked > 0
            && (self.kinks as f64) <= MAX_SKIPPED_FRACTION * total as f64
    }
}

pub type CaseBuilder = fn(&mut ChaCha8Rng) -> Result<GradCase>;

pub fn modules() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("scan", |r| Ok(scan_case(r))),
        ("conv", |r| Ok(conv_case(r))),
        ("bilinear", |r| Ok(bilinear_case(r))),
        ("backbone", backbone_case),
        ("mfi", mfi_case),
        ("cam", cam_case),
        ("dam", dam_case),
        ("head", head_case),
        ("model", model_case),
    ]
}

pub fn check_module(name: &str, build: CaseBuilder, draws: usize, coords: usize, seed: u64) -> Result<ModuleGradReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ModuleGradReport {
        module: name.to_string(),
        draws,
        max_rel_error: 0.0,
        checked: 0,
        kinks: 0,
        seconds: 0.0,
    };
    for _ in 0..draws {
        let mut case = build(&mut rng)?;
        let r = case.check(&mut rng, coords)?;
        report.max_rel_error = report.max_rel_error.max(r.rel_error);
        report.checked += r.checked;
        report.kinks += r.kinks;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Every module, 20 draws each.
pub fn run() -> Result<Vec<CheckRecord>> {
    modules()
        .into_iter()
        .enumerate()
        .map(|(i, (name, build))| {
            let r = check_module(name, build, 20, 24, 100 + i as u64)?;
            Ok(CheckRecord {
                name: format!("grad_{name}"),
                passed: r.passed(),
                detail: format!(
                    "{} draws, {} coords, {} kinks skipped, max rel {:.3e}, {:.2}s",
                    r.draws, r.checked, r.kinks, r.max_rel_error, r.seconds
                ),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut case = GradCase {
            store: ParamStore::new(),
            inputs: vec![rand_t(&mut rng, &[5])],
            mode: Mode::Eval,
            forward: Box::new(|_, v| Ok(vec![v[0].mul(v[0])?])),
        };
        let r = case.check(&mut rng, 5).unwrap();
        assert!(r.rel_error < 1e-8 && r.checked == 5, "{r:?}");
    }

    #[test]
    fn detached_factor_is_caught() {
        // x * stop_grad(x): reverse mode sees x, differences see 2x
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut case = GradCase {
            store: ParamStore::new(),
            inputs: vec![rand_t(&mut rng, &[5])],
            mode: Mode::Eval,
            forward: Box::new(|ctx, v| Ok(vec![v[0].mul(ctx.constant(v[0].value().as_ref().clone()))?])),
        };
        assert!(case.check(&mut rng, 5).unwrap().rel_error > 0.3);
    }

    #[test]
    fn relu_kink_inside_the_stencil_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut case = GradCase {
            store: ParamStore::new(),
            inputs: vec![Tensor::new(&[1], vec![0.5 * STEP], DType::F64).unwrap()],
            mode: Mode::Eval,
            forward: Box::new(|_, v| Ok(vec![v[0].relu()])),
        };
        let r = case.check(&mut rng, 3).unwrap();
        assert_eq!((r.checked, r.kinks), (0, 3));
    }

    #[test]
    fn every_module_builds_and_checks() {
        for (i, (name, build)) in modules().into_iter().enumerate() {
            let r = check_module(name, build, 1, 4, i as u64).unwrap();
            assert!(r.max_rel_error <= TOLERANCE, "{r:?}");
        }
    }
}
