//! Slow reference implementations written independently of the fast
//! kernels, and the comparisons against them.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cam::select_experts;
use crate::error::Result;
use crate::nn::Attention;
use crate::params::{Ctx, Init, Mode, ParamStore};
use crate::tensor::kernels::{self, ScanDims, ScanInputs};
use crate::tensor::{ConvMode, ConvSpec, DType, Tape, Tensor};

use super::CheckRecord;

/// Random selective-scan problem with positive step sizes and stable decay.
#[derive(Clone, Debug)]
pub struct ScanInstance {
    pub dims: ScanDims,
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub skip: Vec<f64>,
}

impl ScanInstance {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_len: usize, max_channels: usize, max_state: usize) -> Self {
        let len = rng.random_range(1..=max_len);
        let d = rng.random_range(1..=max_channels);
        let s = rng.random_range(1..=max_state);
        let mut normal = |n: usize, std: f64| Tensor::randn(&[n], std, DType::F64, rng).into_data();
        let delta = normal(len * d, 1.0).into_iter().map(kernels::softplus).collect();
        let a = normal(d * s, 0.5).into_iter().map(|v| -v.exp()).collect();
        ScanInstance {
            dims: ScanDims {
                len,
                channels: d,
                state: s,
            },
            x: normal(len * d, 1.0),
            delta,
            a,
            b: normal(len * s, 1.0),
            c: normal(len * s, 1.0),
            skip: normal(d, 1.0),
        }
    }

    pub fn inputs(&self) -> ScanInputs<'_> {
        ScanInputs {
            x: &self.x,
            delta: &self.delta,
            a: &self.a,
            b: &self.b,
            c: &self.c,
            skip: &self.skip,
        }
    }
}

/// Step-by-step recurrence: discretize `A_bar = exp(delta A)` and
/// `B_bar = delta B` for the step, update every state vector, read out.
pub fn scan_recurrence(inst: &ScanInstance) -> Vec<f64> {
    let ScanDims { len, channels: d, state: s } = inst.dims;
    let mut states = vec![vec![0.0; s]; d];
    let mut y = Vec::with_capacity(len * d);
    for t in 0..len {
        for (ch, h) in states.iter_mut().enumerate() {
            let dt = inst.delta[t * d + ch];
            let a_bar: Vec<f64> = (0..s).map(|k| (dt * inst.a[ch * s + k]).exp()).collect();
            let b_bar: Vec<f64> = (0..s).map(|k| dt * inst.b[t * s + k]).collect();
            let x = inst.x[t * d + ch];
            for k in 0..s {
                h[k] = a_bar[k] * h[k] + b_bar[k] * x;
            }
            let readout: f64 = (0..s).map(|k| inst.c[t * s + k] * h[k]).sum();
            y.push(readout + inst.skip[ch] * x);
        }
    }
    y
}

/// Closed form `y_t = sum_{u <= t} <c_t, exp(a sum_{v=u+1..t} delta_v) delta_u b_u> x_u + skip x_t`,
/// quadratic in the sequence length.
pub fn scan_unrolled(inst: &ScanInstance) -> Vec<f64> {
    let ScanDims { len, channels: d, state: s } = inst.dims;
    let mut y = vec![0.0; len * d];
    for t in 0..len {
        for ch in 0..d {
            let mut acc = 0.0;
            for u in 0..=t {
                let elapsed: f64 = (u + 1..=t).map(|v| inst.delta[v * d + ch]).sum();
                let du = inst.delta[u * d + ch];
                for k in 0..s {
                    let decay = (inst.a[ch * s + k] * elapsed).exp();
                    acc += inst.c[t * s + k] * decay * du * inst.b[u * s + k] * inst.x[u * d + ch];
                }
            }
            y[t * d + ch] = acc + inst.skip[ch] * inst.x[t * d + ch];
        }
    }
    y
}

/// `max |a - b| / max |b|`, with `0` when both are identically zero.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOracleReport {
    pub instances: usize,
    /// Fast kernel against the step-by-step recurrence.
    pub max_rel_recurrence: f64,
    /// Fast kernel against the unrolled closed form.
    pub max_rel_unrolled: f64,
    pub seconds: f64,
}

/// Compares the linear-pass kernel with both oracles on random instances
/// with `L <= 64`, `D <= 8`, `S <= 16`.
pub fn scan_oracle_suite(instances: usize, seed: u64) -> ScanOracleReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rec: f64 = 0.0;
    let mut unr: f64 = 0.0;
    for _ in 0..instances {
        let inst = ScanInstance::random(&mut rng, 64, 8, 16);
        let (fast, _) = kernels::selective_scan(inst.inputs(), inst.dims, false);
        rec = rec.max(max_relative_error(&fast, &scan_recurrence(&inst)));
        unr = unr.max(max_relative_error(&fast, &scan_unrolled(&inst)));
    }
    ScanOracleReport {
        instances,
        max_rel_recurrence: rec,
        max_rel_unrolled: unr,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Direct 2-D convolution over `[C, H, W]` with zero padding.
pub fn conv2d_direct(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, _, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    let p = spec.padding as isize;
    let h_out = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let w_out = (w + 2 * spec.padding - kw) / spec.stride + 1;
    let mut out = vec![0.0; c_out * h_out * w_out];
    for o in 0..c_out {
        let inputs: Vec<(usize, usize)> = match spec.mode {
            ConvMode::Depthwise => vec![(o, 0)],
            _ => (0..c_in).map(|i| (i, i)).collect(),
        };
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                for &(ci, ki) in &inputs {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * spec.stride + ky) as isize - p;
                            let ix = (ox * spec.stride + kx) as isize - p;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += kernel.at(&[o, ki, ky, kx]) * x.at(&[ci, iy as usize, ix as usize]);
                        }
                    }
                }
                out[(o * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    Tensor::new(&[c_out, h_out, w_out], out, DType::F64).expect("output shape")
}

/// Bilinear lookup written as a sum of tent functions over every cell,
/// after clamping the point into the grid.
pub fn bilinear_tent(grid: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (h, w, c) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let mut out = vec![0.0; c];
    for i in 0..h {
        let wy = (1.0 - (yc - i as f64).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for j in 0..w {
            let wx = (1.0 - (xc - j as f64).abs()).max(0.0);
            if wx == 0.0 {
                continue;
            }
            for (ch, o) in out.iter_mut().enumerate() {
                *o += wy * wx * grid.at(&[i, j, ch]);
            }
        }
    }
    out
}

/// Multi-head attention with explicit loops over heads, queries and keys.
pub fn attention_direct(store: &ParamStore, attn: &Attention, queries: &Tensor, context: &Tensor) -> Tensor {
    let lin = |l: &crate::nn::Linear, x: &Tensor| {
        let wt = store.get(l.weight);
        let (n, din) = x.dims2().expect("matrix input");
        let dout = l.d_out;
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            for o in 0..dout {
                let mut acc = l.bias.map_or(0.0, |b| store.get(b).data()[o]);
                for k in 0..din {
                    acc += x.data()[i * din + k] * wt.data()[k * dout + o];
                }
                out[i * dout + o] = acc;
            }
        }
        Tensor::new(&[n, dout], out, DType::F64).expect("projection shape")
    };
    let q = lin(&attn.query, queries);
    let k = lin(&attn.key, context);
    let v = lin(&attn.value, context);
    let (nq, dim) = q.dims2().expect("matrix");
    let nk = k.dims2().expect("matrix").0;
    let hd = dim / attn.heads;
    let mut merged = vec![0.0; nq * dim];
    for head in 0..attn.heads {
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| (0..hd).map(|e| q.at(&[i, head * hd + e]) * k.at(&[j, head * hd + e])).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for j in 0..nk {
                let p = (logits[j] - max).exp() / z;
                for e in 0..hd {
                    merged[i * dim + head * hd + e] += p * v.at(&[j, head * hd + e]);
                }
            }
        }
    }
    lin(&attn.output, &Tensor::new(&[nq, dim], merged, DType::F64).expect("merged shape"))
}

/// Whether `chosen` is a valid top-`k` routing of `scores`: contains both end
/// layers, has `k` distinct members, and every chosen interior layer beats
/// every unchosen one on score, ties going to the lower index.
pub fn is_valid_routing(scores: &[f64], k: usize, chosen: &[usize]) -> bool {
    let l = scores.len();
    let mut set = chosen.to_vec();
    set.sort_unstable();
    set.dedup();
    if set.len() != k || !set.contains(&1) || !set.contains(&l) || set.iter().any(|&v| v == 0 || v > l) {
        return false;
    }
    let beats = |i: usize, j: usize| scores[i - 1] > scores[j - 1] || (scores[i - 1] == scores[j - 1] && i < j);
    set.iter()
        .filter(|&&i| i != 1 && i != l)
        .all(|&i| (2..l).filter(|j| !set.contains(j)).all(|j| beats(i, j)))
}

/// Exhaustive search over every layer subset for the valid routing.
pub fn brute_force_routing(scores: &[f64], k: usize) -> Option<Vec<usize>> {
    let l = scores.len();
    let mut found = None;
    for mask in 0u32..(1 << l) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let set: Vec<usize> = (0..l).filter(|b| mask & (1 << b) != 0).map(|b| b + 1).collect();
        if is_valid_routing(scores, k, &set) {
            if found.is_some() {
                return None;
            }
            found = Some(set);
        }
    }
    found
}

/// Every score vector over `{0, 1, 2}^6` and every `k` in `2..=6` against the
/// brute-force oracle. Returns the number of cases and the mismatches.
pub fn routing_exhaustive_l6() -> (usize, usize) {
    let l = 6;
    let (mut cases, mut bad) = (0, 0);
    for code in 0..3usize.pow(l as u32) {
        let scores: Vec<f64> = (0..l).map(|i| ((code / 3usize.pow(i as u32)) % 3) as f64).collect();
        for k in 2..=l {
            cases += 1;
            let mut got = match select_experts(&scores, k) {
                Ok(v) => v,
                Err(_) => {
                    bad += 1;
                    continue;
                }
            };
            got.sort_unstable();
            if brute_force_routing(&scores, k) != Some(got) {
                bad += 1;
            }
        }
    }
    (cases, bad)
}

fn record(name: &str, passed: bool, detail: String) -> CheckRecord {
    CheckRecord {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Fast kernels against every oracle.
pub fn run() -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    let scan = scan_oracle_suite(100, 1);
    out.push(record(
        "scan_vs_recurrence",
        scan.max_rel_recurrence <= 1e-10 && scan.max_rel_unrolled <= 1e-10,
        format!(
            "{} instances, max rel {:.3e} (recurrence) {:.3e} (unrolled), {:.2}s",
            scan.instances, scan.max_rel_recurrence, scan.max_rel_unrolled, scan.seconds
        ),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut conv_err: f64 = 0.0;
    for trial in 0..30 {
        let c = rng.random_range(1..5);
        let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
        let (spec, kshape) = match trial % 3 {
            0 => (ConvSpec::pointwise(), [rng.random_range(1..5), c, 1, 1]),
            1 => (ConvSpec::depthwise(1), [c, 1, 3, 3]),
            _ => (ConvSpec::dense(1), [rng.random_range(1..5), c, 3, 3]),
        };
        let x = Tensor::randn(&[c, h, w], 1.0, DType::F64, &mut rng);
        let k = Tensor::randn(&kshape, 1.0, DType::F64, &mut rng);
        let b = Tensor::randn(&[kshape[0]], 1.0, DType::F64, &mut rng);
        let fast = x.conv2d(&k, Some(&b), spec)?;
        conv_err = conv_err.max(max_relative_error(fast.data(), conv2d_direct(&x, &k, Some(&b), spec).data()));
    }
    out.push(record("conv2d_vs_direct", conv_err <= 1e-12, format!("max rel {conv_err:.3e}")));

    let mut conv1d_err: f64 = 0.0;
    for _ in 0..30 {
        let (l, d, width) = (rng.random_range(1..20), rng.random_range(1..6), rng.random_range(1..5));
        let x = Tensor::randn(&[l, d], 1.0, DType::F64, &mut rng);
        let k = Tensor::randn(&[d, width], 1.0, DType::F64, &mut rng);
        let fast = x.conv1d_depthwise(&k, None)?;
        let mut direct = vec![0.0; l * d];
        for t in 0..l {
            for ch in 0..d {
                // the last tap sees the current token
                for lag in 0..width.min(t + 1) {
                    direct[t * d + ch] += k.at(&[ch, width - 1 - lag]) * x.at(&[t - lag, ch]);
                }
            }
        }
        conv1d_err = conv1d_err.max(max_relative_error(fast.data(), &direct));
    }
    out.push(record("conv1d_vs_direct", conv1d_err <= 1e-12, format!("max rel {conv1d_err:.3e}")));

    let mut bil_err: f64 = 0.0;
    for _ in 0..30 {
        let (h, w, c) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..4));
        let grid = Tensor::randn(&[h, w, c], 1.0, DType::F64, &mut rng);
        let n = 16;
        let pts: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-2.0..8.0)).collect();
        let fast = grid.bilinear_sample(&Tensor::new(&[n, 2], pts.clone(), DType::F64)?)?;
        let direct: Vec<f64> = (0..n).flat_map(|i| bilinear_tent(&grid, pts[2 * i], pts[2 * i + 1])).collect();
        bil_err = bil_err.max(max_relative_error(fast.data(), &direct));
    }
    out.push(record("bilinear_vs_tent_sum", bil_err <= 1e-12, format!("max rel {bil_err:.3e}")));

    let mut attn_err: f64 = 0.0;
    for trial in 0..10 {
        let heads = 1 + trial % 3;
        let dim = heads * rng.random_range(1..4);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut Init::new(&mut store, &mut rng, DType::F64), "attn", dim, heads, false)?;
        let q = Tensor::randn(&[rng.random_range(1..6), dim], 1.0, DType::F64, &mut rng);
        let kv = Tensor::randn(&[rng.random_range(1..9), dim], 1.0, DType::F64, &mut rng);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let fast = attn.forward(&ctx, ctx.constant(q.clone()), ctx.constant(kv.clone()))?.out.value();
        attn_err = attn_err.max(max_relative_error(fast.data(), attention_direct(&store, &attn, &q, &kv).data()));
    }
    out.push(record("attention_vs_loops", attn_err <= 1e-12, format!("max rel {attn_err:.3e}")));

    let (cases, bad) = routing_exhaustive_l6();
    out.push(record(
        "routing_vs_brute_force_l6",
        bad == 0,
        format!("{cases} cases, {bad} mismatches"),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_agree_with_each_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let inst = ScanInstance::random(&mut rng, 12, 3, 4);
            assert!(max_relative_error(&scan_recurrence(&inst), &scan_unrolled(&inst)) < 1e-12);
        }
    }

    #[test]
    fn single_step_scan_by_hand() {
        let inst = ScanInstance {
            dims: ScanDims {
                len: 1,
                channels: 1,
                state: 1,
            },
            x: vec![2.0],
            delta: vec![0.5],
            a: vec![-1.0],
            b: vec![3.0],
            c: vec![4.0],
            skip: vec![0.25],
        };
        // h = 0.5 * 3 * 2 = 3, y = 4 * 3 + 0.25 * 2
        assert_eq!(scan_recurrence(&inst), vec![12.5]);
    }

    #[test]
    fn tent_sum_at_cell_centers_reads_cells() {
        let grid = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0], DType::F64).unwrap();
        assert_eq!(bilinear_tent(&grid, 1.0, 0.0), vec![2.0]);
        assert_eq!(bilinear_tent(&grid, 0.5, 0.5), vec![2.5]);
        assert_eq!(bilinear_tent(&grid, -3.0, 9.0), vec![3.0]);
    }

    #[test]
    fn brute_force_prefers_lower_index_on_ties() {
        assert_eq!(brute_force_routing(&[0.0; 6], 4), Some(vec![1, 2, 3, 6]));
    }
}
