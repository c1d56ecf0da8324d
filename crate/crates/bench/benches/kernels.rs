use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rgbt_bench::{mfi_fixture, prefix, ScanFixture};
use rgbt_core::config::RunConfig;
use rgbt_core::data::{gen_sequence, GenConfig};
use rgbt_core::model::Model;
use rgbt_core::scaling::{dense_interaction, DenseAttentionWeights};
use rgbt_core::tensor::kernels::{selective_scan, ScanInputs};
use rgbt_core::tracker::Tracker;
use rgbt_core::{Ctx, Mode, Tape};

fn scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("selective_scan");
    for len in [256, 1024, 4096] {
        let f = ScanFixture::new(len, 4, 8);
        group.throughput(Throughput::Elements(len as u64));
        group.bench_with_input(BenchmarkId::from_parameter(len), &f, |b, f| {
            let inp = ScanInputs {
                x: &f.x,
                delta: &f.delta,
                a: &f.a,
                b: &f.b,
                c: &f.c,
                skip: &f.skip,
            };
            b.iter(|| selective_scan(black_box(inp), f.dims, false))
        });
    }
    group.finish();
}

// the interaction against dense bidirectional cross-attention on the same streams
fn interaction(c: &mut Criterion) {
    let sizes = [256, 512, 1024, 2048];
    let (store, mfi, rgb, tir) = mfi_fixture(*sizes.last().unwrap());
    let dim = rgb.shape()[1];
    let weights = [DenseAttentionWeights::random(dim, 1), DenseAttentionWeights::random(dim, 2)];
    let mut group = c.benchmark_group("interaction");
    group.sample_size(10);
    for n in sizes {
        let (r, t) = (prefix(&rgb, n), prefix(&tir, n));
        group.bench_with_input(BenchmarkId::new("mfi", n), &n, |b, _| {
            b.iter(|| {
                let tape = Tape::inference();
                let ctx = Ctx::new(&tape, &store, Mode::Eval);
                let out = mfi.forward(&ctx, ctx.constant(r.clone()), ctx.constant(t.clone())).unwrap();
                black_box(out.0.value());
            })
        });
        group.bench_with_input(BenchmarkId::new("dense_attention", n), &n, |b, &n| {
            b.iter(|| dense_interaction(black_box(r.data()), black_box(t.data()), n, &weights))
        });
    }
    group.finish();
}

fn tracker_step(c: &mut Criterion) {
    let cfg = RunConfig::toy();
    let (store, model) = Model::init(&cfg).unwrap();
    let mut g = GenConfig::new(cfg.seed, 2);
    g.frame_side = cfg.frame_side;
    let seq = gen_sequence(&g).unwrap();
    let mut group = c.benchmark_group("tracker");
    group.sample_size(10);
    group.bench_function("toy_step", |b| {
        b.iter(|| {
            let mut tracker = Tracker::init(&model, &store, &cfg, &seq.rgb[0], &seq.tir[0], seq.gt[0]).unwrap();
            black_box(tracker.step(&seq.rgb[1], &seq.tir[1]).unwrap().bbox)
        })
    });
    group.finish();
}

criterion_group!(benches, scan, interaction, tracker_step);
criterion_main!(benches);
