use proptest::prelude::*;
use rgbt_core::check::invariants::tracker_state_ok;
use rgbt_core::config::RunConfig;
use rgbt_core::data::{gen_sequence, load_sequence, save_sequence, GenConfig, Sequence};
use rgbt_core::model::Model;
use rgbt_core::tracker::{boxes_to_text, run_tracker, Tracker};
use rgbt_core::train::train_overfit;

fn small_cfg(seed: u64) -> RunConfig {
    RunConfig {
        embed_dim: 16,
        depth: 3,
        mfi_layers: vec![2],
        mfi_ratio: 4,
        state_dim: 4,
        head_width: 8,
        seed,
        ..RunConfig::toy()
    }
}

fn sequence(seed: u64, frames: usize, misalignment: f64) -> Sequence {
    let mut g = GenConfig::new(seed, frames);
    g.frame_side = 64;
    g.misalignment_px = misalignment;
    gen_sequence(&g).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn state_invariants_hold_after_every_frame(
        seed in 0u64..1000,
        frames in 2usize..7,
        misalignment in 0.0..4.0f64,
        interval in prop::option::of(1usize..4),
        threshold in 0.0..1.0f64,
    ) {
        let cfg = RunConfig {
            update_interval: interval,
            update_threshold: threshold,
            ..small_cfg(seed)
        };
        let (store, model) = Model::init(&cfg).unwrap();
        let seq = sequence(seed + 1, frames, misalignment);
        let mut tracker = Tracker::init(&model, &store, &cfg, &seq.rgb[0], &seq.tir[0], seq.gt[0]).unwrap();
        let mut boxes = vec![seq.gt[0]];
        prop_assert!(tracker_state_ok(&cfg, &seq, tracker.state(), &boxes));
        for i in 1..seq.len() {
            let r = tracker.step(&seq.rgb[i], &seq.tir[i]).unwrap();
            prop_assert_eq!(r.frame, i);
            prop_assert!(r.selected.iter().all(|s| s.len() == cfg.experts));
            boxes.push(r.bbox);
            prop_assert!(tracker_state_ok(&cfg, &seq, tracker.state(), &boxes));
            if interval.is_none() {
                prop_assert_eq!(tracker.state().zt_source.0, 0);
            }
        }
    }
}

#[test]
fn short_pipeline_is_byte_identical_across_runs() {
    let run = |dir: &std::path::Path| {
        let cfg = RunConfig {
            output_dir: Some(dir.to_path_buf()),
            frames: 4,
            ..small_cfg(3)
        };
        let mut g = GenConfig::new(cfg.seed, cfg.frames);
        g.frame_side = cfg.frame_side;
        let seq = gen_sequence(&g).unwrap();
        let out = train_overfit(&cfg, &seq, 3, cfg.learning_rate).unwrap();
        let read = |name: &str| std::fs::read(dir.join(name)).unwrap();
        (read("init.cadw"), read("final.cadw"), read("loss.csv"), boxes_to_text(&out.report.track.boxes))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn sequence_read_from_disk_tracks_like_the_generated_one() {
    let cfg = small_cfg(4);
    let (store, model) = Model::init(&cfg).unwrap();
    let seq = sequence(5, 4, 2.0);
    let dir = tempfile::tempdir().unwrap();
    save_sequence(&seq, dir.path()).unwrap();
    let loaded = load_sequence(dir.path()).unwrap();
    let a = run_tracker(&model, &store, &cfg, &seq).unwrap();
    let b = run_tracker(&model, &store, &cfg, &loaded).unwrap();
    assert_eq!(a.boxes[0], seq.gt[0]);
    assert_eq!(boxes_to_text(&a.boxes), boxes_to_text(&b.boxes));
}
