//! Exit gate: one PASS/FAIL line per acceptance criterion, tolerances pinned.

use std::time::{Duration, Instant};

use rgbt_core::check::gradcheck::{self, MAX_SKIPPED_FRACTION, TOLERANCE as GRAD_TOLERANCE};
use rgbt_core::check::invariants::{dam_identity_at_init, mfi_identity_at_init, routing_policy_suite, sampling_suite};
use rgbt_core::check::oracles::{routing_exhaustive_l6, scan_oracle_suite};
use rgbt_core::config::RunConfig;
use rgbt_core::data::{gen_sequence, GenConfig, Sequence};
use rgbt_core::mfi::{dense_cross_attention_flops, mfi_flops};
use rgbt_core::model::Model;
use rgbt_core::scaling::{bench_scaling, ScalingKernel, DEFAULT_COUNTS};
use rgbt_core::tracker::boxes_to_text;
use rgbt_core::train::train_overfit;
use rgbt_core::weights::{decode_weights, encode_weights, load_weights, save_weights};
use rgbt_core::DType;

const SCAN_INSTANCES: usize = 100;
const SCAN_REL_TOL: f64 = 1e-10;
const SCAN_BUDGET: Duration = Duration::from_secs(10);
const GRAD_DRAWS: usize = 20;
const GRAD_COORDS: usize = 24;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const MFI_MAX_EXPONENT: f64 = 1.3;
const ATTN_MIN_EXPONENT: f64 = 1.7;
const ROUTING_VECTORS: usize = 1000;
const OFFSET_FIELDS: usize = 1000;
const OVERFIT_FRAMES: usize = 20;
const OVERFIT_MISALIGNMENT_PX: f64 = 2.0;
const OVERFIT_STEPS: usize = 500;
const MIN_MEAN_IOU: f64 = 0.5;
const MIN_PRECISION: f64 = 0.8;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);

struct Gate {
    lines: Vec<String>,
    failed: usize,
}

impl Gate {
    fn report(&mut self, id: usize, passed: bool, detail: String) {
        let line = format!("criterion {id}: {} {detail}", if passed { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push(line);
        if !passed {
            self.failed += 1;
        }
    }
}

fn scan_oracle(gate: &mut Gate) {
    let r = scan_oracle_suite(SCAN_INSTANCES, 1);
    let worst = r.max_rel_recurrence.max(r.max_rel_unrolled);
    let passed = r.instances == SCAN_INSTANCES && worst <= SCAN_REL_TOL && r.seconds < SCAN_BUDGET.as_secs_f64();
    gate.report(
        1,
        passed,
        format!(
            "{} instances, max rel {worst:.2e} (tol {SCAN_REL_TOL:e}), {:.3}s",
            r.instances, r.seconds
        ),
    );
}

fn identity_at_init(gate: &mut Gate) {
    let toy = RunConfig::toy();
    let toy64 = RunConfig {
        dtype: DType::F64,
        ..RunConfig::toy()
    };
    let mfi = mfi_identity_at_init(&toy, 3).unwrap() && mfi_identity_at_init(&toy64, 3).unwrap();
    let dam = dam_identity_at_init(16, 1, DType::F32, 10, 1).unwrap() && dam_identity_at_init(16, 3, DType::F64, 10, 2).unwrap();
    gate.report(2, mfi && dam, format!("backbone bit-identical {mfi}, cue and templates unchanged {dam}"));
}

fn gradients(gate: &mut Gate) {
    let start = Instant::now();
    let mut passed = true;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (i, (name, build)) in gradcheck::modules().into_iter().enumerate() {
        let r = gradcheck::check_module(name, build, GRAD_DRAWS, GRAD_COORDS, 100 + i as u64).unwrap();
        passed &= r.passed() && r.draws >= GRAD_DRAWS;
        worst = worst.max(r.max_rel_error);
        parts.push(format!("{name} {:.1e} ({}/{} skipped)", r.max_rel_error, r.kinks, r.checked + r.kinks));
    }
    let elapsed = start.elapsed();
    passed &= elapsed < GRAD_BUDGET;
    gate.report(
        3,
        passed,
        format!(
            "h = {:e}, {GRAD_DRAWS} draws/module, max rel {worst:.2e} (tol {GRAD_TOLERANCE:e}), \
             non-smooth skips <= {MAX_SKIPPED_FRACTION}, {:.1}s [{}]",
            gradcheck::STEP,
            elapsed.as_secs_f64(),
            parts.join(", ")
        ),
    );
}

fn scaling(gate: &mut Gate) {
    let mfi = bench_scaling(ScalingKernel::Mfi, &DEFAULT_COUNTS, 3).unwrap();
    let attn = bench_scaling(ScalingKernel::DenseAttention, &DEFAULT_COUNTS, 3).unwrap();
    let paper = RunConfig::paper();
    let tokens = paper.backbone().layout().total();
    let mfi_cost = mfi_flops(&paper.mfi(), tokens).total();
    let attn_cost = dense_cross_attention_flops(tokens, paper.embed_dim);
    let passed = mfi.exponent <= MFI_MAX_EXPONENT && attn.exponent >= ATTN_MIN_EXPONENT && mfi_cost < attn_cost;
    gate.report(
        4,
        passed,
        format!(
            "MFI exponent {:.3} (<= {MFI_MAX_EXPONENT}), attention exponent {:.3} (>= {ATTN_MIN_EXPONENT}), \
             paper profile {tokens} tokens: MFI {:.3} GFLOP < attention {:.3} GFLOP",
            mfi.exponent,
            attn.exponent,
            mfi_cost as f64 / 1e9,
            attn_cost as f64 / 1e9
        ),
    );
}

fn routing(gate: &mut Gate) {
    let r = routing_policy_suite(ROUTING_VECTORS, 3);
    let (cases, bad) = routing_exhaustive_l6();
    gate.report(
        5,
        r.failures.is_empty() && bad == 0 && cases > 0,
        format!(
            "{} vectors / {} (vector, k) cases, {} failures; L = 6 exhaustive {cases} cases, {bad} mismatches",
            r.vectors,
            r.cases,
            r.failures.len()
        ),
    );
}

fn sampling(gate: &mut Gate) {
    let s = sampling_suite(OFFSET_FIELDS, 4).unwrap();
    gate.report(
        6,
        s.passed(),
        format!(
            "{} fields: zero-offset {}, integer shift {}, locality {}, clamp {}",
            s.fields, s.zero_identity, s.integer_shift, s.locality, s.clamp
        ),
    );
}

fn overfit_sequence(cfg: &RunConfig) -> Sequence {
    let mut g = GenConfig::new(cfg.seed, OVERFIT_FRAMES);
    g.frame_side = cfg.frame_side;
    g.misalignment_px = OVERFIT_MISALIGNMENT_PX;
    gen_sequence(&g).unwrap()
}

struct RunArtifacts {
    init: Vec<u8>,
    trained: Vec<u8>,
    losses: Vec<u8>,
    boxes: String,
    mean_iou: f64,
    precision: f64,
    elapsed: Duration,
}

fn full_run(dir: &std::path::Path) -> RunArtifacts {
    let cfg = RunConfig {
        output_dir: Some(dir.to_path_buf()),
        ..RunConfig::toy()
    };
    let seq = overfit_sequence(&cfg);
    let start = Instant::now();
    let out = train_overfit(&cfg, &seq, OVERFIT_STEPS, cfg.learning_rate).unwrap();
    let elapsed = start.elapsed();
    let read = |name: &str| std::fs::read(dir.join(name)).unwrap();
    RunArtifacts {
        init: read("init.cadw"),
        trained: read("final.cadw"),
        losses: read("loss.csv"),
        boxes: boxes_to_text(&out.report.track.boxes),
        mean_iou: out.report.metrics.mean_iou,
        precision: out.report.metrics.precision,
        elapsed,
    }
}

fn round_trip(cfg: &RunConfig, dir: &std::path::Path) -> bool {
    let (store, _) = Model::init(cfg).unwrap();
    let named = store.to_named();
    drop(store);
    let path = dir.join(format!("{:?}.cadw", cfg.profile));
    save_weights(&path, &named).unwrap();
    let back = load_weights(&path).unwrap();
    let same = back.len() == named.len()
        && back
            .iter()
            .zip(&named)
            .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.dtype() == t2.dtype() && t1.bit_eq(t2));
    drop(back);
    std::fs::remove_file(&path).unwrap();
    same
}

fn overfit_and_determinism(gate: &mut Gate) {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let a = full_run(dirs[0].path());
    let b = full_run(dirs[1].path());
    let deterministic = a.init == b.init && a.trained == b.trained && a.losses == b.losses && a.boxes == b.boxes;
    let passed = a.mean_iou >= MIN_MEAN_IOU
        && a.precision >= MIN_PRECISION
        && a.elapsed < OVERFIT_BUDGET
        && deterministic;
    gate.report(
        7,
        passed,
        format!(
            "{OVERFIT_STEPS} steps, {OVERFIT_FRAMES} frames, {OVERFIT_MISALIGNMENT_PX} px: mean IoU {:.3} (>= {MIN_MEAN_IOU}), \
             PR@20px {:.3} (>= {MIN_PRECISION}), {:.1}s, repeat identical {deterministic}",
            a.mean_iou,
            a.precision,
            a.elapsed.as_secs_f64()
        ),
    );

    let toy = round_trip(&RunConfig::toy(), dirs[0].path());
    let paper = round_trip(&RunConfig::paper(), dirs[0].path());
    let bytes = decode_weights(&a.trained).and_then(|w| encode_weights(&w)).ok() == Some(a.trained.clone());
    gate.report(
        8,
        toy && paper && bytes && deterministic,
        format!(
            "round trip toy {toy}, paper {paper}, re-encode identical {bytes}; two init-overfit-track runs byte-identical {deterministic}"
        ),
    );
}

fn main() {
    let mut gate = Gate {
        lines: Vec::new(),
        failed: 0,
    };
    scan_oracle(&mut gate);
    identity_at_init(&mut gate);
    gradients(&mut gate);
    scaling(&mut gate);
    routing(&mut gate);
    sampling(&mut gate);
    overfit_and_determinism(&mut gate);
    println!("acceptance: {} of {} criteria passed", gate.lines.len() - gate.failed, gate.lines.len());
    if gate.failed > 0 {
        std::process::exit(1);
    }
}
