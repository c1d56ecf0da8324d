//! Shared fixtures for the kernel benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgbt_core::mfi::{Mfi, MfiConfig};
use rgbt_core::scaling::BenchSetup;
use rgbt_core::tensor::kernels::ScanDims;
use rgbt_core::{DType, Init, ParamStore, Tensor};

pub const SEED: u64 = 7;

/// Owned inputs of one selective scan of `len` steps.
pub struct ScanFixture {
    pub dims: ScanDims,
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub skip: Vec<f64>,
}

impl ScanFixture {
    pub fn new(len: usize, channels: usize, state: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let mut draw = |n: usize, scale: f64| Tensor::randn(&[n], scale, DType::F64, &mut rng).into_data();
        let delta = draw(len * channels, 1.0).into_iter().map(|v| v.abs() * 0.1).collect();
        let a = draw(channels * state, 1.0).into_iter().map(|v| -v.abs() - 0.1).collect();
        ScanFixture {
            dims: ScanDims { len, channels, state },
            x: draw(len * channels, 1.0),
            delta,
            a,
            b: draw(len * state, 1.0),
            c: draw(len * state, 1.0),
            skip: draw(channels, 1.0),
        }
    }
}

/// The interaction module used by the scaling benchmark, plus two token
/// streams of `max_tokens` rows.
pub fn mfi_fixture(max_tokens: usize) -> (ParamStore, Mfi, Tensor, Tensor) {
    let cfg: MfiConfig = BenchSetup::default().mfi;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut store = ParamStore::new();
    let mfi = Mfi::new(&mut Init::new(&mut store, &mut rng, DType::F64).scope("mfi"), &cfg).expect("valid config");
    let rgb = Tensor::randn(&[max_tokens, cfg.embed_dim], 1.0, DType::F64, &mut rng);
    let tir = Tensor::randn(&[max_tokens, cfg.embed_dim], 1.0, DType::F64, &mut rng);
    (store, mfi, rgb, tir)
}

/// First `n` rows of a `[N, C]` tensor.
pub fn prefix(t: &Tensor, n: usize) -> Tensor {
    let c = t.shape()[1];
    Tensor::new(&[n, c], t.data()[..n * c].to_vec(), t.dtype()).expect("prefix fits")
}
