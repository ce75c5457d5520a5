//! Command-line entry point. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::CheckpointBundle;
use crate::chunking::{plan_chunks, BlendMode};
use crate::config::Config;
use crate::data::{generate_pairs, load_pairs, load_png, save_png, write_pairs, Pair};
use crate::degrade::degrade;
use crate::error::{Error, Result};
use crate::infer::{tiled_restore_with, Bicubic, OneStep, Restore};
use crate::metrics::evaluate;
use crate::midstep::gap_probe;
use crate::models::{Models, PerceptualEmbedder};
use crate::scheduler::Schedule;
use crate::tensor::derive_seed;
use crate::trainer::{
    run_finetune, select_t_star, FineTuner, Pretrainer, TrainSet, STAGE_FINETUNE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "omgsr",
    version,
    about = "One-step mid-timestep guided latent diffusion super-resolution (toy scale)",
    long_about = "One-step mid-timestep guided latent diffusion super-resolution (toy scale).\n\n\
        Every hyperparameter lives in a TOML config with dotted sections; missing keys take \
        the defaults listed in configs/default.toml. All randomness derives from the master seed.",
    arg_required_else_help = true
)]
struct Cli {
    /// TOML config file; defaults are used for missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding `seed` from the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Pair directory with `lq/` and `hq/` PNGs; generated from the seed when absent.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select the mid-timestep t* by matching LQ latents to noisy HQ latents.
    PrecomputeT {
        #[command(flatten)]
        data: DataArgs,
        /// Bundle whose encoder is used; a freshly initialised one otherwise.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Candidate grid stride (default: midstep.candidate_stride, or 1 with midstep.full_grid).
        #[arg(long)]
        stride: Option<usize>,
        /// JSON report path.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Optional `t,mse` CSV.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Trace the latent gap along a multi-step rollout with optional noise injection.
    ProbeGap {
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Injection level (default: midstep.probe.injection_level).
        #[arg(long)]
        level: Option<f64>,
        /// Rollout step receiving the injection (default: midstep.probe.injection_step).
        #[arg(long)]
        injection_step: Option<usize>,
        /// Disable injection entirely.
        #[arg(long, conflicts_with_all = ["level", "injection_step"])]
        no_injection: bool,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Print or save the overlap-chunk layout for an image size.
    ChunkPlan {
        /// Image size as `N` or `HxW`.
        #[arg(long)]
        size: String,
        #[arg(long)]
        patch: usize,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        /// JSON output; stdout when absent.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Degrade one PNG, or generate a procedural LQ/HQ pair directory.
    Degrade {
        /// HQ PNG to degrade; without it a dataset of `--count` pairs is generated.
        #[arg(long, value_name = "PNG")]
        input: Option<PathBuf>,
        /// Output PNG (with `--input`, plus a `.json` parameter sidecar) or dataset directory.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Number of generated pairs (default: data.train_count).
        #[arg(long)]
        count: Option<usize>,
        /// HQ side of generated pairs (default: data.hq_size).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Pre-train the toy autoencoder and denoiser prior.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        /// Resume from a pre-training bundle.
        #[arg(long, value_name = "DIR")]
        resume: Option<PathBuf>,
        /// Stop after this many further steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Output bundle directory; the loss log goes to `<out>/pretrain_loss.csv`.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Fine-tune adapters and the discriminator from a pre-training bundle.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        /// Pre-training bundle, or a fine-tuning bundle to resume.
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Total fine-tune steps (default: finetune.steps).
        #[arg(long)]
        steps: Option<u64>,
        /// Fixed t*, overriding the config.
        #[arg(long)]
        t_star: Option<usize>,
        /// Select t* from the training pairs.
        #[arg(long, conflicts_with = "t_star")]
        select_t: bool,
        /// Run directory: `loss.csv`, `samples/`, `checkpoints/`, `final/`.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Restore one LQ PNG.
    Restore {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PNG")]
        input: PathBuf,
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
    },
    /// Two-stage restore: whole-image pass, then tiled upscaling with blending.
    TileRestore {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PNG")]
        input: PathBuf,
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
        /// Stage-2 tile side (default: tiling.tile).
        #[arg(long)]
        tile: Option<usize>,
        /// Minimum tile overlap (default: tiling.min_overlap).
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long, value_enum, default_value_t = BlendArg::Feather)]
        blend: BlendArg,
    },
    /// Score restorations of a pair directory: CSV rows plus a JSON summary.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Bundle to evaluate; required unless `--baseline bicubic`.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Baseline::Model)]
        baseline: Baseline,
        /// CSV path; the JSON summary is written next to it with a `.json` extension.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BlendArg {
    None,
    Feather,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Model,
    Bicubic,
}

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(cli: &Cli) -> Result<Option<Config>> {
    let mut cfg = match &cli.config {
        Some(p) => Some(Config::load(p)?),
        None => None,
    };
    if let (Some(c), Some(s)) = (cfg.as_mut(), cli.seed) {
        c.seed = s;
    }
    Ok(cfg)
}

fn base_config(cli: &Cli) -> Result<Config> {
    let mut cfg = load_config(cli)?.unwrap_or_default();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Bundle config with the run-time sections of an explicit config and the
/// seed override applied.
fn load_bundle(cli: &Cli, dir: &Path) -> Result<CheckpointBundle> {
    let mut bundle = CheckpointBundle::load(dir)?;
    if let Some(c) = load_config(cli)? {
        bundle.config.finetune = c.finetune;
        bundle.config.midstep = c.midstep;
        bundle.config.tiling = c.tiling;
        bundle.config.data = c.data;
        if !bundle.models.has_adapters() {
            bundle.config.model.lora = c.model.lora;
        }
    }
    if let Some(s) = cli.seed {
        bundle.config.seed = s;
    }
    bundle.config.validate()?;
    Ok(bundle)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)
}

fn dataset(cfg: &Config, dir: Option<&Path>, split: &str, count: usize) -> Result<Vec<Pair>> {
    match dir {
        Some(d) => load_pairs(d),
        None => generate_pairs(
            count,
            cfg.data.hq_size,
            derive_seed(cfg.seed, split, 0),
            &cfg.degradation,
        ),
    }
}

fn train_pairs(cfg: &Config, dir: Option<&Path>) -> Result<Vec<Pair>> {
    dataset(cfg, dir, "data.train", cfg.data.train_count)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("size `{s}` must be N or HxW"));
    let parts: Vec<&str> = s.split('x').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    match nums.as_slice() {
        [n] => Ok((*n, *n)),
        [h, w] => Ok((*h, *w)),
        _ => Err(bad()),
    }
}

fn models_for(cli: &Cli, checkpoint: Option<&Path>) -> Result<(Config, Models)> {
    match checkpoint {
        Some(dir) => {
            let b = load_bundle(cli, dir)?;
            Ok((b.config, b.models))
        }
        None => {
            let cfg = base_config(cli)?;
            let models = Models::new(cfg.model.clone(), cfg.seed)?;
            Ok((cfg, models))
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::PrecomputeT {
            data,
            checkpoint,
            stride,
            out,
            csv,
        } => {
            let (cfg, models) = models_for(&cli, checkpoint.as_deref())?;
            let set = TrainSet::new(&train_pairs(&cfg, data.data.as_deref())?)?;
            let stride = stride.unwrap_or(if cfg.midstep.full_grid {
                1
            } else {
                cfg.midstep.candidate_stride
            });
            let schedule = Schedule::new(cfg.scheduler.clone())?;
            let report = select_t_star(&models, &schedule, &set, stride, cfg.seed)?;
            write_json(out, &report)?;
            if let Some(p) = csv {
                write_file(p, &report.to_csv())?;
            }
            println!("t* = {}", report.t_star);
        }
        Command::ProbeGap {
            checkpoint,
            level,
            injection_step,
            no_injection,
            out,
            csv,
        } => {
            let (cfg, models) = models_for(&cli, checkpoint.as_deref())?;
            let mut probe = cfg.midstep.probe.clone();
            if let Some(l) = level {
                probe.injection_level = *l;
            }
            if let Some(s) = injection_step {
                probe.injection_step = Some(*s);
            }
            if *no_injection {
                probe.injection_step = None;
            }
            let schedule = Schedule::new(cfg.scheduler.clone())?;
            let report = gap_probe(&models, &schedule, &probe, cfg.seed)?;
            write_json(out, &report)?;
            if let Some(p) = csv {
                write_file(p, &report.to_csv())?;
            }
            println!("final gap mse = {}", report.final_mse());
        }
        Command::ChunkPlan {
            size,
            patch,
            overlap,
            out,
        } => {
            let layout = plan_chunks(parse_size(size)?, *patch, *overlap)?;
            match out {
                Some(p) => write_json(p, &layout)?,
                None => println!("{}", serde_json::to_string_pretty(&layout)?),
            }
        }
        Command::Degrade {
            input,
            out,
            count,
            size,
        } => {
            let cfg = base_config(&cli)?;
            match input {
                Some(inp) => {
                    let hq = load_png(inp)?;
                    let (lq, params) =
                        degrade(&hq, &cfg.degradation, derive_seed(cfg.seed, "degrade", 0))?;
                    save_png(out, &lq)?;
                    write_json(&out.with_extension("json"), &params)?;
                }
                None => {
                    let pairs = generate_pairs(
                        count.unwrap_or(cfg.data.train_count),
                        size.unwrap_or(cfg.data.hq_size),
                        derive_seed(cfg.seed, "data.train", 0),
                        &cfg.degradation,
                    )?;
                    write_pairs(out, &pairs)?;
                }
            }
        }
        Command::Pretrain {
            data,
            resume,
            steps,
            out,
        } => {
            let mut trainer = match resume {
                Some(dir) => Pretrainer::resume(load_bundle(&cli, dir)?)?,
                None => Pretrainer::new(base_config(&cli)?)?,
            };
            let set = TrainSet::new(&train_pairs(&trainer.bundle.config, data.data.as_deref())?)?;
            let log = trainer.run(&set, *steps)?;
            trainer.bundle.save(out)?;
            let mut csv = String::from("step,phase,loss\n");
            for s in &log {
                let phase = match s.phase {
                    crate::trainer::PretrainPhase::Vae => "vae",
                    crate::trainer::PretrainPhase::Denoiser => "denoiser",
                };
                writeln!(csv, "{},{phase},{}", s.step, s.loss).expect("string write");
            }
            write_file(&out.join("pretrain_loss.csv"), &csv)?;
            println!(
                "pre-training at step {} of {}",
                trainer.bundle.step,
                trainer.total_steps()
            );
        }
        Command::Finetune {
            data,
            checkpoint,
            steps,
            t_star,
            select_t,
            out,
        } => {
            let bundle = load_bundle(&cli, checkpoint)?;
            let set = TrainSet::new(&train_pairs(&bundle.config, data.data.as_deref())?)?;
            let total = steps.unwrap_or(bundle.config.finetune.steps as u64);
            let mut tuner = if bundle.stage == STAGE_FINETUNE {
                FineTuner::resume(bundle)?
            } else {
                let cfg = &bundle.config;
                let t = if let Some(t) = t_star {
                    *t
                } else if *select_t || cfg.finetune.select_t_star {
                    let schedule = Schedule::new(cfg.scheduler.clone())?;
                    let report = select_t_star(
                        &bundle.models,
                        &schedule,
                        &set,
                        cfg.finetune.candidate_stride,
                        cfg.seed,
                    )?;
                    write_json(&out.join("t_star.json"), &report)?;
                    report.t_star
                } else {
                    cfg.t_star()
                };
                FineTuner::start(bundle, t)?
            };
            let remaining = total.saturating_sub(tuner.bundle.step);
            run_finetune(&mut tuner, &set, remaining, Some(out))?;
            println!(
                "fine-tuned {} steps at t* = {}",
                tuner.bundle.step, tuner.t_star
            );
        }
        Command::Restore {
            checkpoint,
            input,
            out,
        } => {
            let bundle = load_bundle(&cli, checkpoint)?;
            let model = OneStep::from_bundle(&bundle)?;
            save_png(out, &model.restore(&load_png(input)?)?)?;
        }
        Command::TileRestore {
            checkpoint,
            input,
            out,
            tile,
            overlap,
            blend,
        } => {
            let bundle = load_bundle(&cli, checkpoint)?;
            let model = OneStep::from_bundle(&bundle)?;
            let t = &bundle.config.tiling;
            let mode = match blend {
                BlendArg::None => BlendMode::None,
                BlendArg::Feather => BlendMode::Feather,
            };
            let result = tiled_restore_with(
                &model,
                &load_png(input)?,
                tile.unwrap_or(t.tile),
                overlap.unwrap_or(t.min_overlap),
                t.stage2_scale,
                mode,
            )?;
            save_png(out, &result.image)?;
        }
        Command::Evaluate {
            data,
            checkpoint,
            baseline,
            out,
        } => {
            let embedder = PerceptualEmbedder::default();
            let report = match (baseline, checkpoint) {
                (Baseline::Bicubic, _) => {
                    let cfg = base_config(&cli)?;
                    let pairs =
                        dataset(&cfg, data.data.as_deref(), "data.val", cfg.data.val_count)?;
                    evaluate(
                        &Bicubic {
                            scale: cfg.degradation.downscale_factor,
                        },
                        &pairs,
                        &embedder,
                    )?
                }
                (Baseline::Model, Some(dir)) => {
                    let bundle = load_bundle(&cli, dir)?;
                    let cfg = &bundle.config;
                    let pairs = dataset(cfg, data.data.as_deref(), "data.val", cfg.data.val_count)?;
                    evaluate(&OneStep::from_bundle(&bundle)?, &pairs, &embedder)?
                }
                (Baseline::Model, None) => {
                    return Err(Error::Config(
                        "evaluate needs --checkpoint unless --baseline bicubic".into(),
                    ));
                }
            };
            write_file(out, &report.to_csv())?;
            write_json(&out.with_extension("json"), &report.summary)?;
            println!(
                "{} images: psnr {:.4} ssim {:.4} pdist {:.4}",
                report.summary.count,
                report.summary.mean_psnr,
                report.summary.mean_ssim,
                report.summary.mean_pdist
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["omgsr"]), EXIT_USAGE);
        assert_eq!(run(["omgsr", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["omgsr", "chunk-plan", "--nope"]), EXIT_USAGE);
        assert_eq!(run(["omgsr", "--help"]), EXIT_OK);
    }

    #[test]
    fn runtime_errors_exit_two() {
        assert_eq!(
            run(["omgsr", "chunk-plan", "--size", "100", "--patch", "224"]),
            EXIT_RUNTIME
        );
        assert_eq!(
            run(["omgsr", "chunk-plan", "--size", "axb", "--patch", "4"]),
            EXIT_RUNTIME
        );
        assert_eq!(
            run([
                "omgsr",
                "--config",
                "/nonexistent/c.toml",
                "degrade",
                "--out",
                "/tmp/x"
            ]),
            EXIT_RUNTIME
        );
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("512").unwrap(), (512, 512));
        assert_eq!(parse_size("256x384").unwrap(), (256, 384));
        assert!(parse_size("1x2x3").is_err());
    }
}
