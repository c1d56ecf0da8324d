//! Runtime scaling of the cross-modal interaction against dense
//! cross-attention: median wall time per token count and a log-log
//! least-squares fit of the growth exponent.

use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfi::{dense_cross_attention_flops, mfi_flops, Mfi, MfiConfig};
use crate::params::{Ctx, Init, Mode, ParamStore};
use crate::tensor::{DType, Tape, Tensor};

/// Token counts of the standard sweep.
pub const DEFAULT_COUNTS: [usize; 5] = [512, 1024, 2048, 4096, 8192];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKernel {
    Mfi,
    DenseAttention,
}

impl ScalingKernel {
    pub fn name(self) -> &'static str {
        match self {
            ScalingKernel::Mfi => "mfi",
            ScalingKernel::DenseAttention => "dense_attention",
        }
    }
}

impl FromStr for ScalingKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfi" => Ok(ScalingKernel::Mfi),
            "attn" | "dense_attention" => Ok(ScalingKernel::DenseAttention),
            other => Err(Error::Config(format!("unknown kernel {other:?}, expected mfi or attn"))),
        }
    }
}

/// Widths used by the timing sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchSetup {
    pub mfi: MfiConfig,
    pub seed: u64,
}

impl Default for BenchSetup {
    fn default() -> Self {
        BenchSetup {
            mfi: MfiConfig {
                embed_dim: 32,
                ratio: 8,
                state_dim: 8,
                layers: 2,
                conv_width: 4,
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub tokens: usize,
    pub median_seconds: f64,
    /// Analytic multiply-accumulate count at this size.
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub kernel: String,
    pub rows: Vec<ScalingRow>,
    /// Slope of `ln t` against `ln N`.
    pub exponent: f64,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kernel,tokens,median_seconds,flops\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", self.kernel, r.tokens, r.median_seconds, r.flops));
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("fit_power_law", "need at least two paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("fit_power_law", "values must be positive and finite"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("fit_power_law", "token counts must differ"));
    }
    Ok(sxy / sxx)
}

fn check_counts(counts: &[usize], repeats: usize) -> Result<()> {
    if counts.len() < 4 {
        return Err(Error::invalid("bench_scaling", format!("need at least 4 token counts, got {}", counts.len())));
    }
    if counts[0] == 0 || counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bench_scaling", "token counts must be positive and strictly ascending"));
    }
    if repeats == 0 {
        return Err(Error::invalid("bench_scaling", "repeats must be positive"));
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median wall time of `run(n)` over `repeats` calls for each count, after
/// one untimed warm-up call per count.
pub fn time_counts(counts: &[usize], repeats: usize, mut run: impl FnMut(usize)) -> Result<Vec<f64>> {
    check_counts(counts, repeats)?;
    Ok(counts
        .iter()
        .map(|&n| {
            run(n);
            let times = (0..repeats)
                .map(|_| {
                    let t = Instant::now();
                    run(n);
                    t.elapsed().as_secs_f64().max(1e-9)
                })
                .collect();
            median(times)
        })
        .collect())
}

/// Fitted exponent of an arbitrary kernel over `counts`.
pub fn fit_kernel(counts: &[usize], repeats: usize, run: impl FnMut(usize)) -> Result<f64> {
    let times = time_counts(counts, repeats, run)?;
    let xs: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    fit_power_law(&xs, &times)
}

/// Reference kernel with `n` units of work.
pub fn planted_linear(n: usize) -> f64 {
    let mut acc = 0.0f64;
    for i in 0..n * 64 {
        acc = black_box(acc.mul_add(0.999_999, i as f64));
    }
    acc
}

/// Reference kernel with `n^2` units of work.
pub fn planted_quadratic(n: usize) -> f64 {
    let mut acc = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            acc = black_box(acc.mul_add(0.999_999, (i ^ j) as f64));
        }
    }
    acc
}

/// Row-major `[n, c] x [c, c]`.
fn project(x: &[f64], w: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        let o = &mut out[i * c..(i + 1) * c];
        for (k, &xv) in row.iter().enumerate() {
            for (ov, &wv) in o.iter_mut().zip(&w[k * c..(k + 1) * c]) {
                *ov += xv * wv;
            }
        }
    }
    out
}

/// Weights of one dense cross-attention direction, each `[C, C]`.
#[derive(Clone, Debug)]
pub struct DenseAttentionWeights {
    pub dim: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub o: Vec<f64>,
}

impl DenseAttentionWeights {
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (dim as f64).sqrt();
        let mut w = || Tensor::randn(&[dim, dim], std, DType::F64, &mut rng).into_data();
        DenseAttentionWeights {
            dim,
            q: w(),
            k: w(),
            v: w(),
            o: w(),
        }
    }
}

/// Single-head softmax attention of `queries` over `context`, both `[n, C]`,
/// with the score matrix streamed one row at a time.
pub fn dense_cross_attention(queries: &[f64], context: &[f64], n: usize, w: &DenseAttentionWeights) -> Vec<f64> {
    let c = w.dim;
    let q = project(queries, &w.q, n, c);
    let k = project(context, &w.k, n, c);
    let v = project(context, &w.v, n, c);
    let scale = 1.0 / (c as f64).sqrt();
    let mut mixed = vec![0.0; n * c];
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let qi = &q[i * c..(i + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * c..(j + 1) * c];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let out = &mut mixed[i * c..(i + 1) * c];
        for (j, &s) in scores.iter().enumerate() {
            let p = s / z;
            for (o, &vv) in out.iter_mut().zip(&v[j * c..(j + 1) * c]) {
                *o += p * vv;
            }
        }
    }
    project(&mixed, &w.o, n, c)
}

/// Both directions of dense cross-attention between two `[n, C]` streams.
pub fn dense_interaction(
    rgb: &[f64],
    tir: &[f64],
    n: usize,
    weights: &[DenseAttentionWeights; 2],
) -> (Vec<f64>, Vec<f64>) {
    (
        dense_cross_attention(rgb, tir, n, &weights[0]),
        dense_cross_attention(tir, rgb, n, &weights[1]),
    )
}

/// Times `kernel` over `counts` and fits its growth exponent.
pub fn bench_scaling(kernel: ScalingKernel, counts: &[usize], repeats: usize) -> Result<ScalingReport> {
    bench_scaling_with(&BenchSetup::default(), kernel, counts, repeats)
}

pub fn bench_scaling_with(
    setup: &BenchSetup,
    kernel: ScalingKernel,
    counts: &[usize],
    repeats: usize,
) -> Result<ScalingReport> {
    check_counts(counts, repeats)?;
    setup.mfi.validate()?;
    let c = setup.mfi.embed_dim;
    let max_n = *counts.last().expect("checked non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let rgb = Tensor::randn(&[max_n, c], 1.0, DType::F64, &mut rng);
    let tir = Tensor::randn(&[max_n, c], 1.0, DType::F64, &mut rng);

    let times = match kernel {
        ScalingKernel::Mfi => {
            let mut store = ParamStore::new();
            let mfi = Mfi::new(&mut Init::new(&mut store, &mut rng, DType::F64).scope("mfi"), &setup.mfi)?;
            let mut failure = None;
            let times = time_counts(counts, repeats, |n| {
                let tape = Tape::inference();
                let ctx = Ctx::new(&tape, &store, Mode::Eval);
                let r = ctx.constant(Tensor::new(&[n, c], rgb.data()[..n * c].to_vec(), DType::F64).expect("prefix"));
                let t = ctx.constant(Tensor::new(&[n, c], tir.data()[..n * c].to_vec(), DType::F64).expect("prefix"));
                if let Err(e) = mfi.forward(&ctx, r, t).map(black_box) {
                    failure.get_or_insert(e);
                }
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            times
        }
        ScalingKernel::DenseAttention => {
            let weights = [
                DenseAttentionWeights::random(c, setup.seed + 1),
                DenseAttentionWeights::random(c, setup.seed + 2),
            ];
            time_counts(counts, repeats, |n| {
                black_box(dense_interaction(&rgb.data()[..n * c], &tir.data()[..n * c], n, &weights));
            })?
        }
    };
    let xs: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    let exponent = fit_power_law(&xs, &times)?;
    let rows = counts
        .iter()
        .zip(&times)
        .map(|(&tokens, &median_seconds)| ScalingRow {
            tokens,
            median_seconds,
            flops: match kernel {
                ScalingKernel::Mfi => mfi_flops(&setup.mfi, tokens).total(),
                ScalingKernel::DenseAttention => dense_cross_attention_flops(tokens, c),
            },
        })
        .collect();
    Ok(ScalingReport {
        kernel: kernel.name().to_string(),
        rows,
        exponent,
    })
}

/// Exponent of the analytic interaction cost over `counts`.
pub fn analytic_exponent(cfg: &MfiConfig, counts: &[usize]) -> Result<f64> {
    let xs: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    let ys: Vec<f64> = counts.iter().map(|&n| mfi_flops(cfg, n).total() as f64).collect();
    fit_power_law(&xs, &ys)
}
