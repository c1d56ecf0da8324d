use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbt_core::check::gradcheck::{GradCase, TOLERANCE};
use rgbt_core::check::oracles::{bilinear_tent, conv2d_direct};
use rgbt_core::tensor::kernels::NORM_EPS;
use rgbt_core::tensor::ConvSpec;
use rgbt_core::{DType, Mode, ParamStore, Tape, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec(), DType::F64).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Tensor {
    Tensor::randn(shape, 1.0, dtype, rng)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert!(Tensor::eye(3, DType::F64).matmul(&x).unwrap().bit_eq(&x));
    let y = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).matmul(&t(&[2, 1], &[0.0, 1.0])).unwrap();
    assert_eq!(y.data(), &[2.0, 4.0]);
    let err = t(&[2, 3], &[0.0; 6]).matmul(&t(&[2, 3], &[0.0; 6])).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (rand_t(&mut rng, &[7, 5], DType::F64), rand_t(&mut rng, &[5, 3], DType::F64));
    assert!(max_rel(a.matmul(&b).unwrap().data(), &naive_matmul(&a, &b)) < 1e-14);
}

#[test]
fn softmax_examples() {
    let u = t(&[1, 4], &[2.0; 4]).softmax(1).unwrap();
    assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let s = t(&[2], &[0.0, 3f64.ln()]).softmax(0).unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-12 && (s.data()[1] - 0.75).abs() < 1e-12);
    assert!(t(&[2], &[0.0, 1.0]).softmax(1).is_err());
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::ones(&[3], DType::F64);
    let zeros = Tensor::zeros(&[3], DType::F64);
    let c = t(&[1, 3], &[5.0, 5.0, 5.0]).layer_norm(&ones, &zeros).unwrap();
    assert_eq!(c.data(), &[0.0, 0.0, 0.0]);
    let bias = t(&[3], &[1.0, 2.0, 6.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_t(&mut rng, &[4, 3], DType::F64);
    let y = x.layer_norm(&ones, &bias).unwrap();
    for row in y.data().chunks(3) {
        assert!((row.iter().sum::<f64>() / 3.0 - 3.0).abs() < 1e-12);
    }
    // two-pass mean and variance oracle
    let gain = rand_t(&mut rng, &[3], DType::F64);
    let y = x.layer_norm(&gain, &bias).unwrap();
    let mut expect = Vec::new();
    for row in x.data().chunks(3) {
        let mean = row.iter().sum::<f64>() / 3.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        for (j, v) in row.iter().enumerate() {
            expect.push((v - mean) / (var + NORM_EPS).sqrt() * gain.data()[j] + bias.data()[j]);
        }
    }
    assert!(max_rel(y.data(), &expect) < 1e-13);
}

#[test]
fn activation_examples() {
    let z = t(&[1], &[0.0]);
    assert_eq!(z.silu().data(), &[0.0]);
    assert_eq!(z.gelu().data(), &[0.0]);
    assert!((t(&[1], &[20.0]).silu().data()[0] - 20.0).abs() < 1e-6);
    let grid: Vec<f64> = (-80..=80).map(|i| i as f64 / 10.0).collect();
    let g = t(&[grid.len()], &grid).gelu();
    for (x, y) in grid.iter().zip(g.data()) {
        let exact = 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        assert!((y - exact).abs() < 1e-3, "gelu({x}) = {y}, erf form {exact}");
    }
}

#[test]
fn convolution_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_t(&mut rng, &[3, 5, 4], DType::F64);
    let mut delta = vec![0.0; 3 * 9];
    for c in 0..3 {
        delta[c * 9 + 4] = 1.0;
    }
    let dw = x.conv2d(&t(&[3, 1, 3, 3], &delta), None, ConvSpec::depthwise(1)).unwrap();
    assert!(dw.bit_eq(&x));
    let eye = Tensor::eye(3, DType::F64).reshape(&[3, 3, 1, 1]).unwrap();
    assert!(x.conv2d(&eye, None, ConvSpec::pointwise()).unwrap().bit_eq(&x));
    assert!(x.conv2d(&rand_t(&mut rng, &[2, 4, 3, 3], DType::F64), None, ConvSpec::dense(1)).is_err());

    let seq = rand_t(&mut rng, &[6, 2], DType::F64);
    assert!(seq.conv1d_depthwise(&t(&[2, 1], &[1.0, 1.0]), None).unwrap().bit_eq(&seq));
    assert!(seq.conv1d_depthwise(&t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]), None).unwrap().bit_eq(&seq));
}

#[test]
fn bilinear_examples() {
    let g = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
    let s = g.bilinear_sample(&t(&[3, 2], &[1.0, 0.0, 0.5, 0.5, -9.0, 40.0])).unwrap();
    // (x, y) = (1, 0) reads row 0 column 1; the far point clamps to row 1 column 0
    assert_eq!(s.data(), &[2.0, 2.5, 3.0]);
}

fn conv1d_loop(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let (l, d) = x.dims2().unwrap();
    let width = k.shape()[1];
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        for c in 0..d {
            for j in 0..width {
                let src = t as isize - (width - 1 - j) as isize;
                if src >= 0 {
                    out[t * d + c] += k.at(&[c, j]) * x.at(&[src as usize, c]);
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kernels_match_loop_oracles_in_f32(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f32 = DType::F32;
        let (m, k, n) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let (a, b) = (rand_t(&mut rng, &[m, k], f32), rand_t(&mut rng, &[k, n], f32));
        prop_assert!(max_rel(a.matmul(&b).unwrap().data(), &naive_matmul(&a, &b)) <= 1e-5);

        let (c_in, c_out, h, w) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7));
        let ks = [1, 3][rng.random_range(0..2)];
        let pad = ks / 2;
        let x = rand_t(&mut rng, &[c_in, h, w], f32);
        let kern = rand_t(&mut rng, &[c_out, c_in, ks, ks], f32);
        let bias = rand_t(&mut rng, &[c_out], f32);
        let fast = x.conv2d(&kern, Some(&bias), ConvSpec::dense(pad)).unwrap();
        prop_assert!(max_rel(fast.data(), conv2d_direct(&x, &kern, Some(&bias), ConvSpec::dense(pad)).data()) <= 1e-5);
        let dk = rand_t(&mut rng, &[c_in, 1, 3, 3], f32);
        let fast = x.conv2d(&dk, None, ConvSpec::depthwise(1)).unwrap();
        prop_assert!(max_rel(fast.data(), conv2d_direct(&x, &dk, None, ConvSpec::depthwise(1)).data()) <= 1e-5);

        let (l, d, width) = (rng.random_range(1..12), rng.random_range(1..4), rng.random_range(1..5));
        let seq = rand_t(&mut rng, &[l, d], f32);
        let k1 = rand_t(&mut rng, &[d, width], f32);
        prop_assert!(max_rel(seq.conv1d_depthwise(&k1, None).unwrap().data(), &conv1d_loop(&seq, &k1)) <= 1e-5);

        let grid = rand_t(&mut rng, &[h, w, c_in], f32);
        let pts: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..8.0)).collect();
        let s = grid.bilinear_sample(&Tensor::new(&[5, 2], pts.clone(), f32).unwrap()).unwrap();
        let expect: Vec<f64> = pts.chunks(2).flat_map(|p| bilinear_tent(&grid, p[0] as f32 as f64, p[1] as f32 as f64)).collect();
        prop_assert!(max_rel(s.data(), &expect) <= 1e-5);
    }

    #[test]
    fn softmax_slices_sum_to_one_and_ignore_shifts(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
        shift in -100.0..100.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], 5.0, DType::F32, &mut rng);
        for axis in 0..2 {
            let s = x.softmax(axis).unwrap();
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
            // shift rounding in f32 perturbs inputs by ~1e-5, so invariance is checked in f64
            let wide = x.to_dtype(DType::F64);
            let base = wide.softmax(axis).unwrap();
            let shifted = wide.map(|v| v + shift).softmax(axis).unwrap();
            prop_assert!(base.data().iter().zip(shifted.data()).all(|(a, b)| (a - b).abs() <= 1e-6));
            let sums: Vec<f64> = if axis == 1 {
                s.data().chunks(cols).map(|r| r.iter().sum()).collect()
            } else {
                (0..cols).map(|j| (0..rows).map(|i| s.at(&[i, j])).sum()).collect()
            };
            prop_assert!(sums.iter().all(|v| (v - 1.0).abs() <= 1e-6));
        }
    }

    #[test]
    fn results_stay_finite_on_finite_inputs(seed in any::<u64>(), scale in 1.0..1e3f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[4, 6], scale, DType::F32, &mut rng);
        let ones = Tensor::ones(&[6], DType::F32);
        let zeros = Tensor::zeros(&[6], DType::F32);
        for y in [
            x.softmax(1).unwrap(),
            x.layer_norm(&ones, &zeros).unwrap(),
            x.silu(),
            x.gelu(),
            x.sigmoid(),
            x.softplus(),
        ] {
            prop_assert!(y.all_finite());
        }
    }
}

type Op = for<'a> fn(&[Var<'a>]) -> rgbt_core::Result<Var<'a>>;

fn primitive(name: &str, shapes: &[&[usize]], positive: bool, op: Op) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 31);
    for _ in 0..20 {
        let inputs = shapes
            .iter()
            .map(|s| {
                let t = Tensor::randn(s, 1.0, DType::F64, &mut rng);
                if positive { t.map(|v| v.abs() + 0.5) } else { t }
            })
            .collect();
        let mut case = GradCase {
            store: ParamStore::new(),
            inputs,
            mode: Mode::Eval,
            forward: Box::new(move |_, v| Ok(vec![op(v)?])),
        };
        let r = case.check(&mut rng, 12).unwrap();
        assert!(r.rel_error <= TOLERANCE, "{name}: {r:?}");
    }
}

#[test]
fn every_differentiable_primitive_matches_finite_differences() {
    primitive("matmul", &[&[3, 4], &[4, 2]], false, |v| v[0].matmul(v[1]));
    primitive("add", &[&[3, 4], &[3, 4]], false, |v| v[0].add(v[1]));
    primitive("sub", &[&[3, 4], &[3, 4]], false, |v| v[0].sub(v[1]));
    primitive("mul", &[&[3, 4], &[3, 4]], false, |v| v[0].mul(v[1]));
    primitive("div", &[&[3, 4], &[3, 4]], true, |v| v[0].div(v[1]));
    primitive("add_row", &[&[3, 4], &[1, 4]], false, |v| v[0].add_row(v[1]));
    primitive("mul_row", &[&[3, 4], &[1, 4]], false, |v| v[0].mul_row(v[1]));
    primitive("add_col", &[&[3, 4], &[3, 1]], false, |v| v[0].add_col(v[1]));
    primitive("mul_col", &[&[3, 4], &[3, 1]], false, |v| v[0].mul_col(v[1]));
    primitive("scale", &[&[5]], false, |v| Ok(v[0].scale(-1.5).add_scalar(2.0)));
    primitive("neg", &[&[5]], false, |v| Ok(v[0].neg()));
    primitive("silu", &[&[6]], false, |v| Ok(v[0].silu()));
    primitive("gelu", &[&[6]], false, |v| Ok(v[0].gelu()));
    primitive("sigmoid", &[&[6]], false, |v| Ok(v[0].sigmoid()));
    primitive("softplus", &[&[6]], false, |v| Ok(v[0].softplus()));
    primitive("exp", &[&[6]], false, |v| Ok(v[0].exp()));
    primitive("ln", &[&[6]], true, |v| Ok(v[0].ln()));
    primitive("sqrt", &[&[6]], true, |v| Ok(v[0].sqrt()));
    primitive("recip", &[&[6]], true, |v| Ok(v[0].recip()));
    primitive("abs", &[&[6]], true, |v| Ok(v[0].abs()));
    primitive("relu", &[&[6]], false, |v| Ok(v[0].relu()));
    primitive("softmax_rows", &[&[3, 5]], false, |v| v[0].softmax_rows());
    primitive("normalize_rows", &[&[3, 5]], false, |v| v[0].normalize_rows());
    primitive("layer_norm", &[&[3, 5], &[5], &[5]], false, |v| v[0].layer_norm(v[1], v[2]));
    primitive("sum", &[&[3, 5]], false, |v| Ok(v[0].sum()));
    primitive("mean", &[&[3, 5]], false, |v| Ok(v[0].mean()));
    primitive("mean_rows", &[&[3, 5]], false, |v| v[0].mean_rows());
    primitive("sum_cols", &[&[3, 5]], false, |v| v[0].sum_cols());
    primitive("reshape", &[&[3, 4]], false, |v| v[0].reshape(&[2, 6]));
    primitive("transpose", &[&[3, 4]], false, |v| v[0].transpose());
    primitive("slice_rows", &[&[5, 3]], false, |v| v[0].slice_rows(1, 3));
    primitive("slice_cols", &[&[3, 5]], false, |v| v[0].slice_cols(2, 2));
    primitive("reverse_rows", &[&[4, 3]], false, |v| v[0].reverse_rows());
    primitive("concat_rows", &[&[2, 3], &[4, 3]], false, |v| Var::concat_rows(&[v[0], v[1]]));
    primitive("concat_cols", &[&[3, 2], &[3, 4]], false, |v| Var::concat_cols(&[v[0], v[1]]));
    primitive("conv2d", &[&[2, 4, 4], &[3, 2, 3, 3], &[3]], false, |v| {
        v[0].conv2d(v[1], Some(v[2]), ConvSpec::dense(1))
    });
    primitive("conv2d_depthwise", &[&[2, 4, 4], &[2, 1, 3, 3]], false, |v| {
        v[0].conv2d(v[1], None, ConvSpec::depthwise(1))
    });
    primitive("conv1d", &[&[6, 2], &[2, 3], &[2]], false, |v| v[0].conv1d_depthwise(v[1], Some(v[2])));
    primitive("bilinear", &[&[3, 4, 2], &[5, 2]], false, |v| v[0].bilinear_sample(v[1].scale(1.2).add_scalar(1.0)));
    primitive("scan", &[&[6, 2], &[6, 2], &[2, 3], &[6, 3], &[6, 3], &[2]], false, |v| {
        v[0].selective_scan(v[1].softplus(), v[2].exp().neg(), v[3], v[4], v[5])
    });
}

#[test]
fn backward_rejects_non_scalar_and_foreign_losses() {
    let tape = Tape::new();
    let other = Tape::new();
    let x = tape.leaf(Tensor::ones(&[3], DType::F64).with_requires_grad(true));
    assert!(tape.backward(x).is_err());
    let y = other.leaf(Tensor::ones(&[1], DType::F64).with_requires_grad(true));
    assert!(tape.backward(y).is_err());
}
