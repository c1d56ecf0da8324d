use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgbt_core::cam::{aggregate, Cam, CamConfig, ExpertPolicy};
use rgbt_core::config::RunConfig;
use rgbt_core::dam::{propagate_cue, refine_and_respond, CueState, Dam, DamConfig};
use rgbt_core::mfi::{selective_scan, Direction, Mfi};
use rgbt_core::{Ctx, DType, Init, Mode, ParamStore, Tape, Tensor, Var};

fn reverse_rows(t: &Tensor) -> Tensor {
    let (l, d) = t.dims2().unwrap();
    let data = (0..l).rev().flat_map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect();
    Tensor::new(&[l, d], data, t.dtype()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_scan_is_the_forward_scan_of_the_reversed_sequence(seed in any::<u64>(), len in 1usize..24) {
        let cfg = RunConfig { dtype: DType::F64, ..RunConfig::toy() }.mfi();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mfi = Mfi::new(&mut Init::new(&mut store, &mut rng, DType::F64), &cfg).unwrap();
        let x = Tensor::randn(&[len, cfg.latent_dim()], 1.0, DType::F64, &mut rng);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        for layer in &mfi.layers {
            let back = selective_scan(&ctx, ctx.constant(x.clone()), &layer.backward_ssm, Direction::Backward).unwrap();
            let fwd = selective_scan(&ctx, ctx.constant(reverse_rows(&x)), &layer.backward_ssm, Direction::Forward).unwrap();
            prop_assert!(back.value().bit_eq(&reverse_rows(&fwd.value())));
        }
    }

    #[test]
    fn aggregation_is_linear_in_the_layer_features(seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let cfg = CamConfig { embed_dim: 8, depth: 5, experts: 3, policy: ExpertPolicy::Routed };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = Cam::new(&mut Init::new(&mut store, &mut rng, DType::F64), &cfg).unwrap();
        for &w in &cam.experts.weights {
            *store.get_mut(w) = Tensor::randn(&[8], 1.0, DType::F64, &mut rng);
        }
        let f: Vec<Tensor> = (0..5).map(|_| Tensor::randn(&[6, 8], 1.0, DType::F64, &mut rng)).collect();
        let g: Vec<Tensor> = (0..5).map(|_| Tensor::randn(&[6, 8], 1.0, DType::F64, &mut rng)).collect();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let run = |ts: &[Tensor]| {
            let vars: Vec<Var> = ts.iter().map(|t| ctx.constant(t.clone())).collect();
            aggregate(&ctx, &vars, &[1, 3, 5], &cam.experts).unwrap().value().as_ref().clone()
        };
        let mixed: Vec<Tensor> = f.iter().zip(&g).map(|(x, y)| x.map(|v| a * v).add(&y.map(|v| b * v)).unwrap()).collect();
        let lhs = run(&mixed);
        let (rf, rg) = (run(&f), run(&g));
        for i in 0..lhs.numel() {
            let rhs = a * rf.data()[i] + b * rg.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }
}

/// Per-channel bound on one attention update: each head mixes value rows
/// convexly, so `|merged_k| <= max_j |V_jk|` and the output follows.
fn update_bound(store: &ParamStore, dam: &Dam, search: &Tensor) -> Vec<f64> {
    let attn = &dam.cue_attn;
    let mut v = search.matmul(store.get(attn.value.weight)).unwrap();
    let bias = store.get(attn.value.bias.unwrap());
    let (n, d) = v.dims2().unwrap();
    for (i, x) in v.data_mut().iter_mut().enumerate() {
        *x += bias.data()[i % d];
    }
    let peak: Vec<f64> = (0..d).map(|k| (0..n).fold(0.0f64, |m, j| m.max(v.at(&[j, k]).abs()))).collect();
    let wo = store.get(attn.output.weight);
    let bo = store.get(attn.output.bias.unwrap());
    (0..d)
        .map(|c| (0..d).map(|k| peak[k] * wo.at(&[k, c]).abs()).sum::<f64>() + bo.data()[c].abs())
        .collect()
}

#[test]
fn cue_stays_finite_and_bounded_over_a_thousand_frames() {
    let dim = 16;
    let cfg = DamConfig {
        embed_dim: dim,
        heads: 2,
        cue_count: 3,
        offset_scale: 5.0,
        ffn_ratio: 4,
        cue_keys: Default::default(),
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dam = Dam::new(&mut Init::new(&mut store, &mut rng, DType::F32), &cfg).unwrap();
    // zero-initialized output maps would make the cue constant
    for lin in [&dam.cue_attn.output, &dam.refine_attn.output] {
        *store.get_mut(lin.weight) = Tensor::randn(&[dim, dim], 0.25, DType::F32, &mut rng);
        *store.get_mut(lin.bias.unwrap()) = Tensor::randn(&[dim], 0.1, DType::F32, &mut rng);
    }
    let mut state = CueState::initial(&store, &dam);
    for frame in 0..1000 {
        let scale = [0.1, 1.0, 30.0][frame % 3];
        let search = Tensor::randn(&[25, dim], scale, DType::F32, &mut rng);
        let bound = update_bound(&store, &dam, &search);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let cue = ctx.constant(state.cues[0].clone());
        let f_s = ctx.constant(search.clone());
        let (next, weights) = propagate_cue(&ctx, cue, f_s, &dam.cue_attn).unwrap();
        for w in &weights {
            for row in w.data().chunks(25) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
        let response = refine_and_respond(&ctx, next, f_s, &dam).unwrap();
        assert!(response.gate.value().all_finite() && response.features.value().all_finite());
        let next = next.value().as_ref().clone();
        for (i, (new, old)) in next.data().iter().zip(state.cues[0].data()).enumerate() {
            let limit = bound[i % dim];
            assert!((new - old).abs() <= limit * (1.0 + 1e-4) + 1e-4, "frame {frame} entry {i}");
        }
        state.cues[0] = next;
        state.frame += 1;
        assert!(state.is_finite(), "frame {frame}");
    }
}
