use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use rgbt_core::check::{run_suite, Suite};
use rgbt_core::config::{Profile, RunConfig};
use rgbt_core::data::{gen_sequence, load_sequence, save_sequence, GenConfig, Sequence};
use rgbt_core::dump::{dump_maps, router_trace_csv};
use rgbt_core::metrics::eval_metrics;
use rgbt_core::model::Model;
use rgbt_core::scaling::{bench_scaling, ScalingKernel};
use rgbt_core::tracker::{boxes_to_text, run_tracker};
use rgbt_core::train::{train_overfit, window_means};
use rgbt_core::weights::{checksum, load_weights, save_weights};
use rgbt_core::ParamStore;

#[derive(Parser)]
#[command(name = "rgbt", version, about = "RGB-thermal tracker: weights, tracking, training and self-checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes freshly initialized weights for a profile.
    InitWeights {
        #[arg(long, default_value = "toy")]
        profile: Profile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tracks a sequence directory and writes boxes, router trace and metrics.
    Track {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generates a synthetic RGB-thermal sequence.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        side: usize,
        /// Peak TIR translation in pixels.
        #[arg(long, default_value_t = 2.0)]
        misalignment: f64,
    },
    /// Fits the toy model to the configured synthetic sequence, then tracks it.
    Overfit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Overrides `output_dir` for checkpoints and the loss CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Times a kernel over token counts and fits the scaling exponent.
    Bench {
        #[arg(long)]
        kernel: ScalingKernel,
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096,8192")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Writes the timing table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs a self-check suite; exits non-zero if any check fails.
    Check {
        #[arg(long)]
        suite: Suite,
    },
    /// Tracks up to frame N and writes that frame's score, gate and offset
    /// maps and router scores.
    DumpMaps {
        #[arg(long)]
        frame: usize,
        /// Defaults to the toy profile.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the sequence the config describes.
        #[arg(long)]
        sequence: Option<PathBuf>,
        /// Defaults to initialization from the config seed.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "maps")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::toy()),
    }
}

fn config_sequence(cfg: &RunConfig) -> Result<Sequence> {
    let mut g = GenConfig::new(cfg.seed, cfg.frames);
    g.frame_side = cfg.frame_side;
    g.misalignment_px = cfg.misalignment_px;
    Ok(gen_sequence(&g)?)
}

fn load_model(cfg: &RunConfig, weights: Option<&Path>) -> Result<(ParamStore, Model)> {
    let (mut store, model) = Model::init(cfg)?;
    if let Some(path) = weights {
        let named = load_weights(path).with_context(|| format!("loading weights {}", path.display()))?;
        store.load_named(named)?;
    }
    Ok((store, model))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::InitWeights { profile, seed, out } => {
            let cfg = RunConfig {
                seed,
                ..RunConfig::for_profile(profile)
            };
            let (store, _) = Model::init(&cfg)?;
            let named = store.to_named();
            drop(store);
            save_weights(&out, &named)?;
            let scalars: usize = named.iter().map(|(_, t)| t.numel()).sum();
            println!("{} tensors, {scalars} scalars, sha256 {}", named.len(), checksum(&named)?);
        }
        Command::Track {
            config,
            sequence,
            weights,
            out,
        } => {
            let cfg = load_config(Some(&config))?;
            let seq = load_sequence(&sequence).with_context(|| format!("loading sequence {}", sequence.display()))?;
            let (store, model) = load_model(&cfg, Some(&weights))?;
            let result = run_tracker(&model, &store, &cfg, &seq)?;
            let metrics = eval_metrics(&result.boxes, &seq.gt)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("boxes.txt"), boxes_to_text(&result.boxes))?;
            std::fs::write(out.join("router.csv"), router_trace_csv(&result.frames))?;
            std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
            println!(
                "{} frames: mean IoU {:.4}, PR@20px {:.4}, success AUC {:.4}",
                seq.len(),
                metrics.mean_iou,
                metrics.precision,
                metrics.success_auc
            );
        }
        Command::GenData {
            seed,
            frames,
            out,
            side,
            misalignment,
        } => {
            let mut g = GenConfig::new(seed, frames);
            g.frame_side = side;
            g.misalignment_px = misalignment;
            save_sequence(&gen_sequence(&g)?, &out)?;
            println!("wrote {frames} frames to {}", out.display());
        }
        Command::Overfit { config, steps, out } => {
            let mut cfg = load_config(Some(&config))?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let seq = config_sequence(&cfg)?;
            let outcome = train_overfit(&cfg, &seq, steps, cfg.learning_rate)?;
            let report = &outcome.report;
            let window = (steps / 10).max(1);
            for (i, mean) in window_means(&report.losses, window).iter().enumerate() {
                println!("steps {:>5}..{:<5} mean loss {mean:.5}", i * window, ((i + 1) * window).min(steps));
            }
            println!(
                "mean IoU {:.4}, PR@20px {:.4}, success AUC {:.4}",
                report.metrics.mean_iou, report.metrics.precision, report.metrics.success_auc
            );
            if let Some((init, trained)) = &report.checkpoints {
                println!("checkpoints {} and {}", init.display(), trained.display());
            }
        }
        Command::Bench {
            kernel,
            sizes,
            repeats,
            out,
        } => {
            let report = bench_scaling(kernel, &sizes, repeats)?;
            let csv = report.to_csv();
            print!("{csv}");
            println!("exponent {:.4}", report.exponent);
            if let Some(path) = out {
                std::fs::write(path, csv)?;
            }
        }
        Command::Check { suite } => {
            let records = run_suite(suite)?;
            for r in &records {
                println!("{r}");
            }
            return Ok(records.iter().all(|r| r.passed));
        }
        Command::DumpMaps {
            frame,
            config,
            sequence,
            weights,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seq = match &sequence {
                Some(dir) => load_sequence(dir)?,
                None => config_sequence(&cfg)?,
            };
            if frame == 0 || frame >= seq.len() {
                bail!("frame must be in 1..{}, got {frame}", seq.len());
            }
            let (store, model) = load_model(&cfg, weights.as_deref())?;
            let truncated = Sequence {
                rgb: seq.rgb[..=frame].to_vec(),
                tir: seq.tir[..=frame].to_vec(),
                gt: seq.gt[..=frame].to_vec(),
                shifts: seq.shifts.iter().take(frame + 1).copied().collect(),
            };
            let result = run_tracker(&model, &store, &cfg, &truncated)?;
            let files = dump_maps(&result.frames[frame - 1], &out)?;
            println!("score map {}", files.score.display());
            println!("router scores {}", files.router.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
